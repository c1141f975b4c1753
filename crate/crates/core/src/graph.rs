//! Feature graphs with dictionary-style node and edge stores.
//!
//! Every tensor in `ndata` has one row per node and every tensor in `edata`
//! one row per edge. The check happens on every insertion, so no reachable
//! `FeatureGraph` holds a mis-sized feature.

use std::collections::BTreeMap;

use crate::structures::{distance, AtomicStructure};
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_CUTOFF: f64 = 6.0;
pub const DEFAULT_MAX_NEIGHBORS: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error(
        "{domain} feature '{name}': expected leading dimension {expected}, got shape {shape:?}"
    )]
    FeatureSize {
        domain: Domain,
        name: String,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("edge {src}->{dst} is out of range for {num_nodes} nodes")]
    EdgeOutOfRange {
        src: usize,
        dst: usize,
        num_nodes: usize,
    },
    #[error("missing {1} feature '{0}'")]
    MissingFeature(String, Domain),
    #[error("cannot batch graphs: {0}")]
    Schema(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Node,
    Edge,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Node => "node",
            Domain::Edge => "edge",
        })
    }
}

#[derive(Debug, Clone)]
pub struct FeatureGraph {
    num_nodes: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    ndata: BTreeMap<String, Tensor>,
    edata: BTreeMap<String, Tensor>,
    graph_ids: Vec<usize>,
    num_graphs: usize,
    nodes_per_graph: Vec<usize>,
    edges_per_graph: Vec<usize>,
}

impl FeatureGraph {
    /// Graph with directed edges `src[k] -> dst[k]` and no features.
    pub fn new(num_nodes: usize, src: Vec<usize>, dst: Vec<usize>) -> Result<Self, GraphError> {
        if src.len() != dst.len() {
            return Err(GraphError::Schema(format!(
                "{} sources but {} destinations",
                src.len(),
                dst.len()
            )));
        }
        if let Some((&s, &d)) = src
            .iter()
            .zip(&dst)
            .find(|(&s, &d)| s >= num_nodes || d >= num_nodes)
        {
            return Err(GraphError::EdgeOutOfRange {
                src: s,
                dst: d,
                num_nodes,
            });
        }
        let num_edges = src.len();
        Ok(FeatureGraph {
            num_nodes,
            src,
            dst,
            ndata: BTreeMap::new(),
            edata: BTreeMap::new(),
            graph_ids: vec![0; num_nodes],
            num_graphs: 1,
            nodes_per_graph: vec![num_nodes],
            edges_per_graph: vec![num_edges],
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn num_graphs(&self) -> usize {
        self.num_graphs
    }

    pub fn src(&self) -> &[usize] {
        &self.src
    }

    pub fn dst(&self) -> &[usize] {
        &self.dst
    }

    /// Graph membership of each node (all zeros when unbatched).
    pub fn graph_ids(&self) -> &[usize] {
        &self.graph_ids
    }

    pub fn nodes_per_graph(&self) -> &[usize] {
        &self.nodes_per_graph
    }

    pub fn edges_per_graph(&self) -> &[usize] {
        &self.edges_per_graph
    }

    pub fn ndata(&self) -> &BTreeMap<String, Tensor> {
        &self.ndata
    }

    pub fn edata(&self) -> &BTreeMap<String, Tensor> {
        &self.edata
    }

    pub fn feature(&self, domain: Domain, name: &str) -> Result<&Tensor, GraphError> {
        let store = match domain {
            Domain::Node => &self.ndata,
            Domain::Edge => &self.edata,
        };
        store
            .get(name)
            .ok_or_else(|| GraphError::MissingFeature(name.to_string(), domain))
    }

    pub fn node(&self, name: &str) -> Result<&Tensor, GraphError> {
        self.feature(Domain::Node, name)
    }

    pub fn edge(&self, name: &str) -> Result<&Tensor, GraphError> {
        self.feature(Domain::Edge, name)
    }

    /// Stores (or overwrites) a feature after checking its leading dimension.
    pub fn set_feature(
        mut self,
        domain: Domain,
        name: &str,
        value: Tensor,
    ) -> Result<Self, GraphError> {
        let expected = match domain {
            Domain::Node => self.num_nodes,
            Domain::Edge => self.num_edges(),
        };
        if value.rank() == 0 || value.dim(0) != expected {
            return Err(GraphError::FeatureSize {
                domain,
                name: name.to_string(),
                expected,
                shape: value.shape().to_vec(),
            });
        }
        let store = match domain {
            Domain::Node => &mut self.ndata,
            Domain::Edge => &mut self.edata,
        };
        store.insert(name.to_string(), value);
        Ok(self)
    }

    /// Splits a batched graph back into its members.
    pub fn unbatch(&self) -> Result<Vec<FeatureGraph>, GraphError> {
        let mut out = Vec::with_capacity(self.num_graphs);
        let (mut node_off, mut edge_off) = (0, 0);
        for (&nn, &ne) in self.nodes_per_graph.iter().zip(&self.edges_per_graph) {
            let src = self.src[edge_off..edge_off + ne]
                .iter()
                .map(|s| s - node_off)
                .collect();
            let dst = self.dst[edge_off..edge_off + ne]
                .iter()
                .map(|d| d - node_off)
                .collect();
            let mut g = FeatureGraph::new(nn, src, dst)?;
            for (name, t) in &self.ndata {
                g = g.set_feature(Domain::Node, name, t.slice(0, node_off, nn)?)?;
            }
            for (name, t) in &self.edata {
                g = g.set_feature(Domain::Edge, name, t.slice(0, edge_off, ne)?)?;
            }
            out.push(g);
            node_off += nn;
            edge_off += ne;
        }
        Ok(out)
    }
}

/// Directed radius graph: edge `j -> i` for every `0 < |x_i - x_j| <= cutoff`,
/// keeping the `max_neighbors` nearest `j` per `i` (ties to the lower index).
///
/// Periodic images are not considered even when a cell is present. Edges are
/// ordered by destination, then source.
pub fn radius_graph(
    structure: &AtomicStructure,
    cutoff: f64,
    max_neighbors: usize,
) -> Result<FeatureGraph, GraphError> {
    if !(cutoff > 0.0) {
        return Err(GraphError::Schema(format!(
            "cutoff must be positive, got {cutoff}"
        )));
    }
    let pos = &structure.positions;
    let n = pos.len();
    let cells = CellList::new(pos, cutoff);
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for i in 0..n {
        candidates.clear();
        cells.for_each_near(&pos[i], |j| {
            if j == i {
                return;
            }
            let d = distance(&pos[i], &pos[j]);
            if d > 0.0 && d <= cutoff {
                candidates.push((d, j));
            }
        });
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        candidates.truncate(max_neighbors);
        let mut kept: Vec<usize> = candidates.iter().map(|&(_, j)| j).collect();
        kept.sort_unstable();
        for j in kept {
            src.push(j);
            dst.push(i);
        }
    }
    let distances: Vec<f64> = src
        .iter()
        .zip(&dst)
        .map(|(&j, &i)| distance(&pos[i], &pos[j]))
        .collect();
    let numbers: Vec<f64> = structure.atomic_numbers.iter().map(|&z| z as f64).collect();
    let num_edges = src.len();
    FeatureGraph::new(n, src, dst)?
        .set_feature(Domain::Node, "atomic_numbers", Tensor::vector(numbers))?
        .set_feature(Domain::Node, "pos", Tensor::from_rows3(pos))?
        .set_feature(
            Domain::Edge,
            "distance",
            Tensor::new([num_edges, 1], distances)?,
        )
}

/// Uniform binning of points into cubes of side `cutoff`.
struct CellList {
    origin: [f64; 3],
    size: f64,
    dims: [usize; 3],
    cells: Vec<Vec<usize>>,
}

impl CellList {
    fn new(pos: &[[f64; 3]], size: f64) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in pos {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if pos.is_empty() {
            lo = [0.0; 3];
            hi = [0.0; 3];
        }
        let mut dims = [1usize; 3];
        for k in 0..3 {
            dims[k] = (((hi[k] - lo[k]) / size).floor() as usize + 1).min(64);
        }
        let mut list = CellList {
            origin: lo,
            size,
            dims,
            cells: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
        };
        for (i, p) in pos.iter().enumerate() {
            let c = list.coords(p);
            let idx = list.index(c);
            list.cells[idx].push(i);
        }
        list
    }

    fn coords(&self, p: &[f64; 3]) -> [usize; 3] {
        let mut c = [0; 3];
        for k in 0..3 {
            let v = ((p[k] - self.origin[k]) / self.size).floor();
            c[k] = (v.max(0.0) as usize).min(self.dims[k] - 1);
        }
        c
    }

    fn index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    fn for_each_near(&self, p: &[f64; 3], mut f: impl FnMut(usize)) {
        let c = self.coords(p);
        let range = |k: usize| c[k].saturating_sub(1)..=(c[k] + 1).min(self.dims[k] - 1);
        for x in range(0) {
            for y in range(1) {
                for z in range(2) {
                    for &j in &self.cells[self.index([x, y, z])] {
                        f(j);
                    }
                }
            }
        }
    }
}

/// Disjoint union of graphs with identical feature schemas.
pub fn batch_graphs(graphs: &[FeatureGraph]) -> Result<FeatureGraph, GraphError> {
    let first = graphs
        .first()
        .ok_or_else(|| GraphError::Schema("no graphs to batch".into()))?;
    for g in &graphs[1..] {
        check_schema(&first.ndata, &g.ndata, Domain::Node)?;
        check_schema(&first.edata, &g.edata, Domain::Edge)?;
    }
    let total_nodes: usize = graphs.iter().map(|g| g.num_nodes).sum();
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut graph_ids = Vec::with_capacity(total_nodes);
    let mut nodes_per_graph = Vec::new();
    let mut edges_per_graph = Vec::new();
    let (mut node_off, mut graph_off) = (0, 0);
    for g in graphs {
        src.extend(g.src.iter().map(|s| s + node_off));
        dst.extend(g.dst.iter().map(|d| d + node_off));
        graph_ids.extend(g.graph_ids.iter().map(|id| id + graph_off));
        nodes_per_graph.extend_from_slice(&g.nodes_per_graph);
        edges_per_graph.extend_from_slice(&g.edges_per_graph);
        node_off += g.num_nodes;
        graph_off += g.num_graphs;
    }
    let mut out = FeatureGraph::new(total_nodes, src, dst)?;
    out.graph_ids = graph_ids;
    out.num_graphs = graph_off;
    out.nodes_per_graph = nodes_per_graph;
    out.edges_per_graph = edges_per_graph;
    for name in first.ndata.keys() {
        let parts: Vec<&Tensor> = graphs.iter().map(|g| &g.ndata[name]).collect();
        out = out.set_feature(Domain::Node, name, Tensor::concat(&parts, 0)?)?;
    }
    for name in first.edata.keys() {
        let parts: Vec<&Tensor> = graphs.iter().map(|g| &g.edata[name]).collect();
        out = out.set_feature(Domain::Edge, name, Tensor::concat(&parts, 0)?)?;
    }
    Ok(out)
}

fn check_schema(
    a: &BTreeMap<String, Tensor>,
    b: &BTreeMap<String, Tensor>,
    domain: Domain,
) -> Result<(), GraphError> {
    if !a.keys().eq(b.keys()) {
        return Err(GraphError::Schema(format!(
            "{domain} feature names differ: {:?} vs {:?}",
            a.keys().collect::<Vec<_>>(),
            b.keys().collect::<Vec<_>>()
        )));
    }
    for (name, t) in a {
        let u = &b[name];
        if t.shape()[1..] != u.shape()[1..] {
            return Err(GraphError::Schema(format!(
                "{domain} feature '{name}' has trailing shape {:?} vs {:?}",
                &t.shape()[1..],
                &u.shape()[1..]
            )));
        }
    }
    Ok(())
}

/// Per-graph sum of a node feature: shape `(num_graphs, rest...)`.
pub fn readout_sum(graph: &FeatureGraph, name: &str) -> Result<Tensor, GraphError> {
    let feature = graph.node(name)?;
    Ok(feature.scatter_add_rows(&graph.graph_ids, graph.num_graphs)?)
}
