//! Dense `f64` tensors with a reverse-mode differentiation tape.
//!
//! A [`Tensor`] is an immutable row-major array. Tensors created through a
//! [`Tape`] remember the primitive that produced them, so [`grad`] can walk the
//! recorded graph backwards. Passing `create_graph = true` records the backward
//! pass on the same tape, which makes gradients differentiable again (needed
//! for force training, where the loss depends on `dE/dx`).

mod backward;
mod fd;
mod kernels;
mod ops;
mod tape;

use std::fmt;
use std::sync::Arc;

pub use backward::grad;
pub use fd::finite_difference;
pub use ops::{apply, broadcast_shape, Primitive};
pub use tape::Tape;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} is out of range for a rank-{rank} tensor")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: row index {index} is out of range for {rows} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("data of length {len} cannot fill shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("gradient needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensors are recorded on different tapes")]
    TapeMismatch,
    #[error("{0} is not recorded on a tape")]
    NotOnTape(&'static str),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

/// Immutable dense tensor, optionally recorded on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    node: Option<NodeRef>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: impl Into<Vec<f64>>) -> Result<Self> {
        let shape = shape.into();
        let data = data.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self::from_parts(shape, data.into()))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<[f64]>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data,
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value].into())
    }

    pub fn vector(values: impl Into<Vec<f64>>) -> Self {
        let values = values.into();
        Self::from_parts(vec![values.len()], values.into())
    }

    /// Builds an `n x 3` matrix from coordinate triples.
    pub fn from_rows3(rows: &[[f64; 3]]) -> Self {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_parts(vec![rows.len(), 3], data.into())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_parts(shape, vec![value; n].into())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of `axis`; panics when the axis does not exist.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub(crate) fn shared_data(&self) -> Arc<[f64]> {
        Arc::clone(&self.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Position of this tensor's node on its tape.
    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub(crate) fn node(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Self {
        self.node = Some(node);
        self
    }

    /// Copy of the values without any tape history.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Records this tensor's values as a fresh leaf on `tape`.
    pub fn track(&self, tape: &Tape) -> Tensor {
        tape.leaf(self)
    }

    /// Bitwise equality of shape and values, ignoring tape membership.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= SHOWN {
            s.field("data", &&self.data[..]);
        } else {
            s.field("data_head", &&self.data[..SHOWN]);
        }
        if let Some(id) = self.node_id() {
            s.field("node", &id);
        }
        s.finish()
    }
}
