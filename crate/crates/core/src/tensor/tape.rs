use std::sync::{Arc, Mutex, MutexGuard};

use super::kernels::View;
use super::ops::Primitive;
use super::{NodeRef, Result, Tensor};

#[derive(Debug, Clone)]
pub(crate) enum NodeOp {
    Leaf,
    Prim(Primitive),
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub op: NodeOp,
    pub parents: Vec<usize>,
    pub shape: Vec<usize>,
    pub value: Arc<[f64]>,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Append-only record of the primitives applied to tracked tensors.
///
/// Parents always precede their children, so node ids are a topological
/// order. Nodes store values only (never tensor handles), so dropping the last
/// `Tape` clone frees the whole graph.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Arc<Mutex<TapeInner>>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, TapeInner> {
        // a poisoned tape only means another holder panicked mid-push; the
        // node list itself is still consistent
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.lock().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same(&self, other: &Tape) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Records `value` as a leaf (parameter, input or constant).
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let id = self.push(NodeOp::Leaf, Vec::new(), value);
        value.detach().with_node(NodeRef {
            tape: self.clone(),
            id,
        })
    }

    pub(crate) fn push(&self, op: NodeOp, parents: Vec<usize>, value: &Tensor) -> usize {
        let mut inner = self.lock();
        let id = inner.nodes.len();
        debug_assert!(parents.iter().all(|&p| p < id));
        inner.nodes.push(Node {
            op,
            parents,
            shape: value.shape().to_vec(),
            value: value.shared_data(),
        });
        id
    }

    /// Copies nodes `0..=last` so the backward pass can run without holding
    /// the lock (it may record new nodes).
    pub(crate) fn snapshot(&self, last: usize) -> Vec<Node> {
        self.lock().nodes[..=last].to_vec()
    }

    /// Re-evaluates every recorded primitive from its parents' stored values
    /// and counts nodes whose output differs bitwise from the recording.
    pub fn replay_mismatches(&self) -> Result<usize> {
        let nodes = self.lock().nodes.clone();
        let mut mismatches = 0;
        for node in &nodes {
            let NodeOp::Prim(prim) = &node.op else {
                continue;
            };
            let views: Vec<View> = node
                .parents
                .iter()
                .map(|&p| View {
                    shape: &nodes[p].shape,
                    data: &nodes[p].value,
                })
                .collect();
            let (shape, data) = prim.eval(&views)?;
            let same = shape == node.shape
                && data
                    .iter()
                    .zip(node.value.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                mismatches += 1;
            }
        }
        Ok(mismatches)
    }

    /// Whether every node's parents precede it.
    pub fn is_topological(&self) -> bool {
        self.lock()
            .nodes
            .iter()
            .enumerate()
            .all(|(id, n)| n.parents.iter().all(|&p| p < id))
    }
}
