use std::sync::Arc;

use super::kernels::{self, Out, View};
use super::{NodeRef, Result, Tape, Tensor, TensorError};

/// Primitive operations that can be recorded on a tape.
///
/// Binary elementwise kinds require equal shapes; the `Tensor` methods insert
/// explicit [`Primitive::BroadcastTo`] nodes before calling them.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Shift(f64),
    MatMul,
    Transpose,
    SumAll,
    SumAxis {
        axis: usize,
        keepdim: bool,
    },
    Abs,
    Square,
    Sqrt,
    Exp,
    Relu,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Pad {
        axis: usize,
        start: usize,
        total: usize,
    },
    BroadcastTo {
        shape: Vec<usize>,
    },
    SumTo {
        shape: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    GatherRows {
        index: Arc<[usize]>,
    },
    ScatterAddRows {
        index: Arc<[usize]>,
        rows: usize,
    },
    MaskedFill {
        mask: Arc<[bool]>,
        value: f64,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Neg => "neg",
            Primitive::Scale(_) => "scale",
            Primitive::Shift(_) => "shift",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::SumAll => "sum",
            Primitive::SumAxis { .. } => "sum_axis",
            Primitive::Abs => "abs",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Exp => "exp",
            Primitive::Relu => "relu",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Pad { .. } => "pad",
            Primitive::BroadcastTo { .. } => "broadcast_to",
            Primitive::SumTo { .. } => "sum_to",
            Primitive::Reshape { .. } => "reshape",
            Primitive::GatherRows { .. } => "gather_rows",
            Primitive::ScatterAddRows { .. } => "scatter_add_rows",
            Primitive::MaskedFill { .. } => "masked_fill",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::MatMul => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }

    /// Forward kernel shared by recording and tape replay.
    pub(crate) fn eval(&self, inputs: &[View]) -> Result<Out> {
        if let Some(expected) = self.arity() {
            if inputs.len() != expected {
                return Err(TensorError::Arity {
                    op: self.name(),
                    expected,
                    got: inputs.len(),
                });
            }
        }
        let a = &inputs[0];
        match self {
            Primitive::Add => kernels::binary("add", a, &inputs[1], |x, y| x + y),
            Primitive::Sub => kernels::binary("sub", a, &inputs[1], |x, y| x - y),
            Primitive::Mul => kernels::binary("mul", a, &inputs[1], |x, y| x * y),
            Primitive::Div => kernels::binary("div", a, &inputs[1], |x, y| x / y),
            Primitive::Neg => Ok(kernels::unary(a, |x| -x)),
            Primitive::Scale(c) => Ok(kernels::unary(a, |x| x * c)),
            Primitive::Shift(c) => Ok(kernels::unary(a, |x| x + c)),
            Primitive::MatMul => kernels::matmul(a, &inputs[1]),
            Primitive::Transpose => kernels::transpose(a),
            Primitive::SumAll => Ok((Vec::new(), vec![a.data.iter().sum()])),
            Primitive::SumAxis { axis, keepdim } => kernels::sum_axis(a, *axis, *keepdim),
            Primitive::Abs => Ok(kernels::unary(a, f64::abs)),
            Primitive::Square => Ok(kernels::unary(a, |x| x * x)),
            Primitive::Sqrt => Ok(kernels::unary(a, f64::sqrt)),
            Primitive::Exp => Ok(kernels::unary(a, f64::exp)),
            // NaN passes through so non-finite values stay visible downstream
            Primitive::Relu => Ok(kernels::unary(a, |x| if x < 0.0 { 0.0 } else { x })),
            Primitive::Concat { axis } => kernels::concat(inputs, *axis),
            Primitive::Slice { axis, start, len } => kernels::slice(a, *axis, *start, *len),
            Primitive::Pad { axis, start, total } => kernels::pad(a, *axis, *start, *total),
            Primitive::BroadcastTo { shape } => kernels::broadcast_to(a, shape),
            Primitive::SumTo { shape } => kernels::sum_to(a, shape),
            Primitive::Reshape { shape } => {
                if super::numel(shape) != a.data.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "reshape",
                        lhs: a.shape.to_vec(),
                        rhs: shape.clone(),
                    });
                }
                Ok((shape.clone(), a.data.to_vec()))
            }
            Primitive::GatherRows { index } => kernels::gather_rows(a, index),
            Primitive::ScatterAddRows { index, rows } => kernels::scatter_add_rows(a, index, *rows),
            Primitive::MaskedFill { mask, value } => kernels::masked_fill(a, mask, *value),
        }
    }
}

/// Evaluates `prim` on `inputs`, recording the result when any input is on a
/// tape. Tape-free inputs mixed with tracked ones are recorded as constants.
pub fn apply(prim: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    let tape = common_tape(inputs)?;
    let views: Vec<View> = inputs
        .iter()
        .map(|t| View {
            shape: t.shape(),
            data: t.data(),
        })
        .collect();
    let (shape, data) = prim.eval(&views)?;
    let out = Tensor::from_parts(shape, data.into());
    match tape {
        None => Ok(out),
        Some(tape) => {
            let parents = inputs
                .iter()
                .map(|t| match t.node() {
                    Some(n) => n.id,
                    None => tape.leaf(t).node_id().expect("leaf is tracked"),
                })
                .collect();
            let id = tape.push(super::tape::NodeOp::Prim(prim), parents, &out);
            Ok(out.with_node(NodeRef { tape, id }))
        }
    }
}

fn common_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<&Tape> = None;
    for t in inputs {
        if let Some(tape) = t.tape() {
            match found {
                None => found = Some(tape),
                Some(f) if f.same(tape) => {}
                Some(_) => return Err(TensorError::TapeMismatch),
            }
        }
    }
    Ok(found.cloned())
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let x = if d + a.len() >= rank {
            a[d + a.len() - rank]
        } else {
            1
        };
        let y = if d + b.len() >= rank {
            b[d + b.len() - rank]
        } else {
            1
        };
        out[d] = match (x, y) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

impl Tensor {
    fn broadcast_pair(&self, other: &Tensor, op: &'static str, prim: Primitive) -> Result<Tensor> {
        if self.shape() == other.shape() {
            return apply(prim, &[self, other]);
        }
        let shape = broadcast_shape(op, self.shape(), other.shape())?;
        let a = self.broadcast_to(&shape)?;
        let b = other.broadcast_to(&shape)?;
        apply(prim, &[&a, &b])
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_pair(other, "add", Primitive::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_pair(other, "sub", Primitive::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_pair(other, "mul", Primitive::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_pair(other, "div", Primitive::Div)
    }

    pub fn neg(&self) -> Result<Tensor> {
        apply(Primitive::Neg, &[self])
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        apply(Primitive::Scale(c), &[self])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        apply(Primitive::Shift(c), &[self])
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        apply(Primitive::MatMul, &[self, other])
    }

    pub fn transpose(&self) -> Result<Tensor> {
        apply(Primitive::Transpose, &[self])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        apply(Primitive::SumAll, &[self])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "mean of an empty tensor".into(),
            });
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        apply(Primitive::SumAxis { axis, keepdim }, &[self])
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        kernels::check_axis("mean_axis", axis, self.rank())?;
        let n = self.dim(axis);
        self.sum_axis(axis, keepdim)?.scale(1.0 / n as f64)
    }

    pub fn abs(&self) -> Result<Tensor> {
        apply(Primitive::Abs, &[self])
    }

    pub fn square(&self) -> Result<Tensor> {
        apply(Primitive::Square, &[self])
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        apply(Primitive::Sqrt, &[self])
    }

    pub fn exp(&self) -> Result<Tensor> {
        apply(Primitive::Exp, &[self])
    }

    pub fn relu(&self) -> Result<Tensor> {
        apply(Primitive::Relu, &[self])
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        apply(Primitive::Slice { axis, start, len }, &[self])
    }

    /// Embeds this tensor at `start` inside a zero tensor of extent `total`
    /// along `axis`; the adjoint of [`Tensor::slice`].
    pub fn pad(&self, axis: usize, start: usize, total: usize) -> Result<Tensor> {
        apply(Primitive::Pad { axis, start, total }, &[self])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        apply(
            Primitive::BroadcastTo {
                shape: shape.to_vec(),
            },
            &[self],
        )
    }

    /// Sums broadcast dimensions away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        apply(
            Primitive::SumTo {
                shape: shape.to_vec(),
            },
            &[self],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[self],
        )
    }

    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        apply(
            Primitive::GatherRows {
                index: index.into(),
            },
            &[self],
        )
    }

    /// Adds row `k` of `self` into row `index[k]` of a zero tensor with `rows` rows.
    pub fn scatter_add_rows(&self, index: &[usize], rows: usize) -> Result<Tensor> {
        apply(
            Primitive::ScatterAddRows {
                index: index.into(),
                rows,
            },
            &[self],
        )
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Result<Tensor> {
        apply(
            Primitive::MaskedFill {
                mask: mask.into(),
                value,
            },
            &[self],
        )
    }
}
