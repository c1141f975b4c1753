use super::{numel, Result, TensorError};

pub(crate) struct View<'a> {
    pub shape: &'a [usize],
    pub data: &'a [f64],
}

pub(crate) type Out = (Vec<usize>, Vec<f64>);

pub(crate) fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::InvalidAxis { op, axis, rank });
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn binary(
    op: &'static str,
    a: &View,
    b: &View,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Out> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.to_vec(),
            rhs: b.shape.to_vec(),
        });
    }
    let data = a.data.iter().zip(b.data).map(|(&x, &y)| f(x, y)).collect();
    Ok((a.shape.to_vec(), data))
}

pub(crate) fn unary(a: &View, f: impl Fn(f64) -> f64) -> Out {
    (a.shape.to_vec(), a.data.iter().map(|&x| f(x)).collect())
}

pub(crate) fn matmul(a: &View, b: &View) -> Result<Out> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.to_vec(),
            rhs: b.shape.to_vec(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok((vec![m, n], out))
}

pub(crate) fn transpose(a: &View) -> Result<Out> {
    if a.shape.len() != 2 {
        return Err(TensorError::Invalid {
            op: "transpose",
            msg: format!("expected a matrix, got shape {:?}", a.shape),
        });
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Ok((vec![c, r], out))
}

pub(crate) fn sum_axis(a: &View, axis: usize, keepdim: bool) -> Result<Out> {
    check_axis("sum_axis", axis, a.shape.len())?;
    let (outer, len, inner) = split_axis(a.shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &a.data[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *dst += v;
            }
        }
    }
    let mut shape = a.shape.to_vec();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Ok((shape, out))
}

pub(crate) fn concat(inputs: &[View], axis: usize) -> Result<Out> {
    let first = inputs.first().ok_or(TensorError::Arity {
        op: "concat",
        expected: 1,
        got: 0,
    })?;
    check_axis("concat", axis, first.shape.len())?;
    let mut total = 0;
    for v in inputs {
        let compatible = v.shape.len() == first.shape.len()
            && v.shape
                .iter()
                .zip(first.shape)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape.to_vec(),
                rhs: v.shape.to_vec(),
            });
        }
        total += v.shape[axis];
    }
    let (outer, _, inner) = split_axis(first.shape, axis);
    let mut shape = first.shape.to_vec();
    shape[axis] = total;
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for v in inputs {
            let chunk = v.shape[axis] * inner;
            out.extend_from_slice(&v.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok((shape, out))
}

pub(crate) fn slice(a: &View, axis: usize, start: usize, len: usize) -> Result<Out> {
    check_axis("slice", axis, a.shape.len())?;
    if start + len > a.shape[axis] {
        return Err(TensorError::Invalid {
            op: "slice",
            msg: format!(
                "range {}..{} exceeds extent {} of axis {axis}",
                start,
                start + len,
                a.shape[axis]
            ),
        });
    }
    let (outer, extent, inner) = split_axis(a.shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&a.data[base..base + len * inner]);
    }
    let mut shape = a.shape.to_vec();
    shape[axis] = len;
    Ok((shape, out))
}

pub(crate) fn pad(a: &View, axis: usize, start: usize, total: usize) -> Result<Out> {
    check_axis("pad", axis, a.shape.len())?;
    let len = a.shape[axis];
    if start + len > total {
        return Err(TensorError::Invalid {
            op: "pad",
            msg: format!("extent {len} at offset {start} does not fit in {total}"),
        });
    }
    let (outer, _, inner) = split_axis(a.shape, axis);
    let mut shape = a.shape.to_vec();
    shape[axis] = total;
    let mut out = vec![0.0; numel(&shape)];
    for o in 0..outer {
        let dst = (o * total + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&a.data[src..src + len * inner]);
    }
    Ok((shape, out))
}

/// Maps every flat index of `to` onto the flat index of `from` it reads under
/// right-aligned broadcasting. Caller guarantees compatibility.
fn broadcast_index_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    let rank = to.len();
    let offset = rank - from.len();
    let mut src_strides = vec![0usize; rank];
    let mut stride = 1;
    for d in (0..from.len()).rev() {
        src_strides[d + offset] = if from[d] == 1 { 0 } else { stride };
        stride *= from[d];
    }
    let n = numel(to);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

pub(crate) fn broadcastable(from: &[usize], to: &[usize]) -> bool {
    from.len() <= to.len()
        && from
            .iter()
            .rev()
            .zip(to.iter().rev())
            .all(|(&f, &t)| f == t || f == 1)
}

pub(crate) fn broadcast_to(a: &View, to: &[usize]) -> Result<Out> {
    if !broadcastable(a.shape, to) {
        return Err(TensorError::ShapeMismatch {
            op: "broadcast_to",
            lhs: a.shape.to_vec(),
            rhs: to.to_vec(),
        });
    }
    let map = broadcast_index_map(a.shape, to);
    Ok((to.to_vec(), map.into_iter().map(|i| a.data[i]).collect()))
}

pub(crate) fn sum_to(a: &View, to: &[usize]) -> Result<Out> {
    if !broadcastable(to, a.shape) {
        return Err(TensorError::ShapeMismatch {
            op: "sum_to",
            lhs: a.shape.to_vec(),
            rhs: to.to_vec(),
        });
    }
    let map = broadcast_index_map(to, a.shape);
    let mut out = vec![0.0; numel(to)];
    for (&dst, &v) in map.iter().zip(a.data) {
        out[dst] += v;
    }
    Ok((to.to_vec(), out))
}

fn row_width(shape: &[usize]) -> usize {
    numel(&shape[1..])
}

pub(crate) fn gather_rows(a: &View, index: &[usize]) -> Result<Out> {
    if a.shape.is_empty() {
        return Err(TensorError::Invalid {
            op: "gather_rows",
            msg: "cannot gather rows of a scalar".into(),
        });
    }
    let rows = a.shape[0];
    let w = row_width(a.shape);
    let mut out = Vec::with_capacity(index.len() * w);
    for &i in index {
        if i >= rows {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: i,
                rows,
            });
        }
        out.extend_from_slice(&a.data[i * w..(i + 1) * w]);
    }
    let mut shape = a.shape.to_vec();
    shape[0] = index.len();
    Ok((shape, out))
}

pub(crate) fn scatter_add_rows(a: &View, index: &[usize], rows: usize) -> Result<Out> {
    if a.shape.is_empty() || a.shape[0] != index.len() {
        return Err(TensorError::Invalid {
            op: "scatter_add_rows",
            msg: format!(
                "source shape {:?} does not have one row per index ({})",
                a.shape,
                index.len()
            ),
        });
    }
    let w = row_width(a.shape);
    let mut out = vec![0.0; rows * w];
    for (k, &i) in index.iter().enumerate() {
        if i >= rows {
            return Err(TensorError::IndexOutOfRange {
                op: "scatter_add_rows",
                index: i,
                rows,
            });
        }
        for (dst, &v) in out[i * w..(i + 1) * w]
            .iter_mut()
            .zip(&a.data[k * w..(k + 1) * w])
        {
            *dst += v;
        }
    }
    let mut shape = a.shape.to_vec();
    shape[0] = rows;
    Ok((shape, out))
}

pub(crate) fn masked_fill(a: &View, mask: &[bool], value: f64) -> Result<Out> {
    if mask.len() != a.data.len() {
        return Err(TensorError::Invalid {
            op: "masked_fill",
            msg: format!(
                "mask of length {} does not cover shape {:?}",
                mask.len(),
                a.shape
            ),
        });
    }
    let data = a
        .data
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { value } else { x })
        .collect();
    Ok((a.shape.to_vec(), data))
}
