use super::ops::Primitive;
use super::tape::{Node, NodeOp};
use super::{NodeRef, Result, Tape, Tensor, TensorError};

/// Gradients of a scalar `output` with respect to each tensor in `wrt`.
///
/// With `create_graph` the backward computation is itself recorded on the
/// output's tape, so the returned gradients can be differentiated again.
/// A `wrt` tensor that `output` does not depend on gets an all-zero gradient.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(TensorError::NotScalar(output.shape().to_vec()));
    }
    let out_node = output.node().ok_or(TensorError::NotOnTape("output"))?;
    let tape = out_node.tape.clone();
    let mut wrt_ids = Vec::with_capacity(wrt.len());
    for w in wrt {
        let node = w.node().ok_or(TensorError::NotOnTape("gradient target"))?;
        if !node.tape.same(&tape) {
            return Err(TensorError::TapeMismatch);
        }
        wrt_ids.push(node.id);
    }

    let last = out_node.id;
    let nodes = tape.snapshot(last);

    // only nodes on a path to some target need a gradient
    let mut needs = vec![false; nodes.len()];
    for &id in &wrt_ids {
        if id <= last {
            needs[id] = true;
        }
    }
    for id in 0..nodes.len() {
        if !needs[id] && nodes[id].parents.iter().any(|&p| needs[p]) {
            needs[id] = true;
        }
    }

    let handle = |id: usize| -> Tensor {
        let n = &nodes[id];
        let t = Tensor::from_parts(n.shape.clone(), n.value.clone());
        if create_graph {
            t.with_node(NodeRef {
                tape: tape.clone(),
                id,
            })
        } else {
            t
        }
    };
    let constant = |t: Tensor| -> Tensor {
        if create_graph {
            tape.leaf(&t)
        } else {
            t
        }
    };

    let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
    if needs[last] {
        grads[last] = Some(constant(Tensor::ones(output.shape().to_vec())));
    }
    for id in (0..nodes.len()).rev() {
        if !needs[id] {
            continue;
        }
        let Some(g) = grads[id].clone() else {
            continue;
        };
        let NodeOp::Prim(prim) = &nodes[id].op else {
            continue;
        };
        let node: &Node = &nodes[id];
        let inputs: Vec<Tensor> = node.parents.iter().map(|&p| handle(p)).collect();
        let parent_grads = vjp(prim, &inputs, &handle(id), &g, &constant)?;
        for (&p, pg) in node.parents.iter().zip(parent_grads) {
            if !needs[p] {
                continue;
            }
            grads[p] = Some(match grads[p].take() {
                None => pg,
                Some(acc) => acc.add(&pg)?,
            });
        }
    }

    Ok(wrt_ids
        .iter()
        .zip(wrt)
        .map(|(&id, w)| match grads.get(id).and_then(|g| g.clone()) {
            Some(g) => g,
            None => constant(Tensor::zeros(w.shape().to_vec())),
        })
        .collect())
}

/// Vector-Jacobian products of one primitive, expressed with primitives so
/// they can be recorded and differentiated again.
fn vjp(
    prim: &Primitive,
    inputs: &[Tensor],
    out: &Tensor,
    g: &Tensor,
    constant: &dyn Fn(Tensor) -> Tensor,
) -> Result<Vec<Tensor>> {
    let a = &inputs[0];
    Ok(match prim {
        Primitive::Add => vec![g.clone(), g.clone()],
        Primitive::Sub => vec![g.clone(), g.neg()?],
        Primitive::Mul => vec![g.mul(&inputs[1])?, g.mul(a)?],
        Primitive::Div => {
            let b = &inputs[1];
            let ga = g.div(b)?;
            // d(a/b)/db = -(a/b)/b
            let gb = g.mul(out)?.div(b)?.neg()?;
            vec![ga, gb]
        }
        Primitive::Neg => vec![g.neg()?],
        Primitive::Scale(c) => vec![g.scale(*c)?],
        Primitive::Shift(_) => vec![g.clone()],
        Primitive::MatMul => {
            let b = &inputs[1];
            vec![g.matmul(&b.transpose()?)?, a.transpose()?.matmul(g)?]
        }
        Primitive::Transpose => vec![g.transpose()?],
        Primitive::SumAll => vec![g.broadcast_to(a.shape())?],
        Primitive::SumAxis { axis, keepdim } => {
            let mut kept = a.shape().to_vec();
            kept[*axis] = 1;
            let g = if *keepdim {
                g.clone()
            } else {
                g.reshape(&kept)?
            };
            vec![g.broadcast_to(a.shape())?]
        }
        Primitive::Abs => {
            let sign: Vec<f64> = a.data().iter().map(|&x| sign(x)).collect();
            let sign = constant(Tensor::new(a.shape().to_vec(), sign)?);
            vec![g.mul(&sign)?]
        }
        Primitive::Square => vec![g.mul(a)?.scale(2.0)?],
        Primitive::Sqrt => vec![g.div(out)?.scale(0.5)?],
        Primitive::Exp => vec![g.mul(out)?],
        Primitive::Relu => {
            let inactive: Vec<bool> = a.data().iter().map(|&x| x <= 0.0).collect();
            vec![g.masked_fill(&inactive, 0.0)?]
        }
        Primitive::Concat { axis } => {
            let mut start = 0;
            let mut parts = Vec::with_capacity(inputs.len());
            for inp in inputs {
                let len = inp.dim(*axis);
                parts.push(g.slice(*axis, start, len)?);
                start += len;
            }
            parts
        }
        Primitive::Slice { axis, start, .. } => vec![g.pad(*axis, *start, a.dim(*axis))?],
        Primitive::Pad { axis, start, .. } => vec![g.slice(*axis, *start, a.dim(*axis))?],
        Primitive::BroadcastTo { .. } => vec![g.sum_to(a.shape())?],
        Primitive::SumTo { .. } => vec![g.broadcast_to(a.shape())?],
        Primitive::Reshape { .. } => vec![g.reshape(a.shape())?],
        Primitive::GatherRows { index } => vec![g.scatter_add_rows(index, a.dim(0))?],
        Primitive::ScatterAddRows { index, .. } => vec![g.gather_rows(index)?],
        Primitive::MaskedFill { mask, .. } => vec![g.masked_fill(mask, 0.0)?],
    })
}

// subgradient convention: d|x|/dx = 0 at x = 0
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tensor {
    /// Shorthand for `grad(self, wrt, false)`.
    pub fn backward(&self, wrt: &[&Tensor]) -> Result<Vec<Tensor>> {
        grad(self, wrt, false)
    }
}

#[allow(dead_code)]
fn _assert_send_sync() {
    fn check<T: Send + Sync>() {}
    check::<Tensor>();
    check::<Tape>();
}
