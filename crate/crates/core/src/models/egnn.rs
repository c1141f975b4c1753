use serde::{Deserialize, Serialize};

use super::{EnergyModel, Init, Mlp, ModelError, ParamMap, ParamSpec};
use crate::graph::FeatureGraph;
use crate::tensor::Tensor;
use crate::Z_MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Sum,
}

/// E(n)-GNN hyperparameters. Defaults are the reference configuration.
///
/// `embed_dim` is the width of the atomic-number embedding and of the node
/// stream; `message_dim` is the width of edge messages. MLP dims list hidden
/// widths only; input and output widths follow from the architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgnnConfig {
    pub embed_dim: usize,
    pub message_dim: usize,
    pub num_layers: usize,
    pub node_mlp_dims: Vec<usize>,
    pub edge_mlp_dims: Vec<usize>,
    pub pos_mlp_dims: Vec<usize>,
    pub activation: Activation,
    pub readout: Readout,
    pub node_proj_depth: usize,
    pub node_proj_hidden: usize,
    pub out_depth: usize,
    pub out_hidden: usize,
    /// Whether layers update the coordinate stream.
    pub update_positions: bool,
}

impl Default for EgnnConfig {
    fn default() -> Self {
        EgnnConfig {
            embed_dim: 32,
            message_dim: 32,
            num_layers: 3,
            node_mlp_dims: vec![48, 48],
            edge_mlp_dims: vec![16, 16],
            pos_mlp_dims: vec![64, 64],
            activation: Activation::Relu,
            readout: Readout::Sum,
            node_proj_depth: 2,
            node_proj_hidden: 128,
            out_depth: 3,
            out_hidden: 64,
            update_positions: true,
        }
    }
}

impl EgnnConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.embed_dim,
            self.message_dim,
            self.node_proj_hidden,
            self.out_hidden,
            self.node_proj_depth,
            self.out_depth,
        ];
        let lists = self
            .node_mlp_dims
            .iter()
            .chain(&self.edge_mlp_dims)
            .chain(&self.pos_mlp_dims);
        if dims.iter().chain(lists).any(|&d| d == 0) {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Per-layer networks.
struct LayerNets {
    edge: Mlp,
    pos: Mlp,
    node: Mlp,
}

/// E(n)-equivariant graph network with a sum readout energy head.
#[derive(Debug, Clone, PartialEq)]
pub struct Egnn {
    config: EgnnConfig,
}

impl Egnn {
    pub fn new(config: EgnnConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Egnn { config })
    }

    pub fn config(&self) -> &EgnnConfig {
        &self.config
    }

    fn layer_nets(&self, layer: usize) -> LayerNets {
        let c = &self.config;
        let with_ends = |input: usize, hidden: &[usize], output: usize| {
            let mut dims = vec![input];
            dims.extend_from_slice(hidden);
            dims.push(output);
            dims
        };
        LayerNets {
            // messages keep a trailing activation, as in the standard EGNN edge model
            edge: Mlp::new(
                format!("layers.{layer}.edge_mlp"),
                with_ends(2 * c.embed_dim + 1, &c.edge_mlp_dims, c.message_dim),
                true,
            ),
            pos: Mlp::new(
                format!("layers.{layer}.pos_mlp"),
                with_ends(c.message_dim, &c.pos_mlp_dims, 1),
                false,
            ),
            node: Mlp::new(
                format!("layers.{layer}.node_mlp"),
                with_ends(c.embed_dim + c.message_dim, &c.node_mlp_dims, c.embed_dim),
                false,
            ),
        }
    }

    fn node_projection(&self) -> Mlp {
        let c = &self.config;
        let mut dims = vec![c.embed_dim];
        dims.extend(std::iter::repeat_n(c.node_proj_hidden, c.node_proj_depth));
        Mlp::new("node_proj", dims, false)
    }

    fn output_head(&self) -> Mlp {
        let c = &self.config;
        let mut dims = vec![c.node_proj_hidden];
        dims.extend(std::iter::repeat_n(c.out_hidden, c.out_depth - 1));
        dims.push(1);
        Mlp::new("output", dims, false)
    }

    /// Invariant node features after the message-passing layers.
    pub fn node_features(
        &self,
        params: &ParamMap,
        batch: &FeatureGraph,
    ) -> Result<(Tensor, Tensor), ModelError> {
        let numbers = batch.node("atomic_numbers")?;
        let pos = batch.node("pos")?;
        let mut rows = Vec::with_capacity(numbers.numel());
        for &z in numbers.data() {
            if !(z >= 1.0 && z <= Z_MAX as f64 && z.fract() == 0.0) {
                return Err(ModelError::AtomicNumber(z));
            }
            rows.push(z as usize - 1);
        }
        let mut h = params.get("embedding.weight")?.gather_rows(&rows)?;
        let mut x = pos.clone();
        let inv_degree = inverse_in_degree(batch);
        for layer in 0..self.config.num_layers {
            let nets = self.layer_nets(layer);
            let (h2, x2) = layer_forward(
                &nets,
                params,
                &h,
                &x,
                batch.src(),
                batch.dst(),
                &inv_degree,
                self.config.update_positions,
            )?;
            h = h2;
            x = x2;
        }
        Ok((h, x))
    }
}

fn inverse_in_degree(batch: &FeatureGraph) -> Tensor {
    let mut deg = vec![0usize; batch.num_nodes()];
    for &d in batch.dst() {
        deg[d] += 1;
    }
    let inv: Vec<f64> = deg.iter().map(|&d| 1.0 / d.max(1) as f64).collect();
    Tensor::new([batch.num_nodes(), 1], inv).expect("one entry per node")
}

#[allow(clippy::too_many_arguments)]
fn layer_forward(
    nets: &LayerNets,
    params: &ParamMap,
    h: &Tensor,
    x: &Tensor,
    src: &[usize],
    dst: &[usize],
    inv_degree: &Tensor,
    update_positions: bool,
) -> Result<(Tensor, Tensor), ModelError> {
    let n = h.dim(0);
    let h_i = h.gather_rows(dst)?;
    let h_j = h.gather_rows(src)?;
    // x_i - x_j for edge j -> i
    let rel = x.gather_rows(dst)?.sub(&x.gather_rows(src)?)?;
    let dist2 = rel.square()?.sum_axis(1, true)?;
    let messages = nets
        .edge
        .forward(params, &Tensor::concat(&[&h_i, &h_j, &dist2], 1)?)?;

    let x_new = if update_positions {
        let weights = nets.pos.forward(params, &messages)?;
        let shift = rel
            .mul(&weights)?
            .scatter_add_rows(dst, n)?
            .mul(inv_degree)?;
        x.add(&shift)?
    } else {
        x.clone()
    };

    let aggregated = messages.scatter_add_rows(dst, n)?;
    let h_new = nets
        .node
        .forward(params, &Tensor::concat(&[h, &aggregated], 1)?)?;
    Ok((h_new, x_new))
}

/// One E(n)-GNN message-passing layer on raw arrays.
///
/// For each edge `j -> i`: `m_ij = EdgeMLP(h_i | h_j | |x_i - x_j|^2)`; then
/// `x_i' = x_i + mean_j (x_i - x_j) PosMLP(m_ij)` and
/// `h_i' = NodeMLP(h_i | sum_j m_ij)`. Nodes without incoming edges keep
/// their position and aggregate a zero message.
pub fn egnn_layer(
    model: &Egnn,
    params: &ParamMap,
    layer: usize,
    h: &Tensor,
    x: &Tensor,
    src: &[usize],
    dst: &[usize],
) -> Result<(Tensor, Tensor), ModelError> {
    let graph = FeatureGraph::new(h.dim(0), src.to_vec(), dst.to_vec())?;
    layer_forward(
        &model.layer_nets(layer),
        params,
        h,
        x,
        src,
        dst,
        &inverse_in_degree(&graph),
        model.config.update_positions,
    )
}

impl EnergyModel for Egnn {
    fn kind(&self) -> &'static str {
        "egnn"
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.config;
        let mut specs = vec![ParamSpec {
            name: "embedding.weight".into(),
            shape: vec![Z_MAX, c.embed_dim],
            init: Init::UniformFanIn(Z_MAX),
        }];
        for layer in 0..c.num_layers {
            let nets = self.layer_nets(layer);
            specs.extend(nets.edge.specs());
            specs.extend(nets.pos.specs());
            specs.extend(nets.node.specs());
        }
        specs.extend(self.node_projection().specs());
        specs.extend(self.output_head().specs());
        specs
    }

    fn forward(&self, params: &ParamMap, batch: &FeatureGraph) -> Result<Tensor, ModelError> {
        let (h, _) = self.node_features(params, batch)?;
        let projected = self.node_projection().forward(params, &h)?;
        let pooled = projected.scatter_add_rows(batch.graph_ids(), batch.num_graphs())?;
        let energy = self.output_head().forward(params, &pooled)?;
        Ok(energy.reshape(&[batch.num_graphs()])?)
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{batch_graphs, Domain};

    fn tiny() -> Egnn {
        Egnn::new(EgnnConfig {
            embed_dim: 4,
            message_dim: 4,
            num_layers: 1,
            node_mlp_dims: vec![5],
            edge_mlp_dims: vec![3],
            pos_mlp_dims: vec![3],
            node_proj_hidden: 6,
            out_hidden: 5,
            ..EgnnConfig::default()
        })
        .unwrap()
    }

    fn two_atom_graph() -> FeatureGraph {
        FeatureGraph::new(3, vec![0, 1], vec![1, 0])
            .unwrap()
            .set_feature(
                Domain::Node,
                "atomic_numbers",
                Tensor::vector([1.0, 8.0, 6.0]),
            )
            .unwrap()
            .set_feature(
                Domain::Node,
                "pos",
                Tensor::from_rows3(&[[0.0, 0.0, 0.0], [1.0, 0.2, 0.0], [4.0, 4.0, 4.0]]),
            )
            .unwrap()
    }

    #[test]
    fn bias_tensors_start_at_zero() {
        let model = Egnn::new(EgnnConfig::default()).unwrap();
        let p = model.init_params(3);
        for (name, t) in p.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!(p.bit_eq(&model.init_params(3)));
        assert!(!p.bit_eq(&model.init_params(4)));
    }

    #[test]
    fn rejects_zero_dims() {
        let bad = EgnnConfig {
            embed_dim: 0,
            ..EgnnConfig::default()
        };
        assert!(Egnn::new(bad).is_err());
    }

    #[test]
    fn isolated_node_keeps_position() {
        let model = tiny();
        let params = model.init_params(0);
        let g = two_atom_graph();
        let h = Tensor::ones([3, 4]);
        let x = g.node("pos").unwrap().clone();
        let (h2, x2) = egnn_layer(&model, &params, 0, &h, &x, g.src(), g.dst()).unwrap();
        assert_eq!(&x2.data()[6..9], &[4.0, 4.0, 4.0]);
        // isolated node sees NodeMLP(h | 0)
        let nets = model.layer_nets(0);
        let expect = nets
            .node
            .forward(
                &params,
                &Tensor::new([1, 8], [1., 1., 1., 1., 0., 0., 0., 0.]).unwrap(),
            )
            .unwrap();
        assert_eq!(&h2.data()[8..12], expect.data());
    }

    #[test]
    fn batched_identical_graphs_give_identical_energies() {
        let model = tiny();
        let params = model.init_params(1);
        let g = two_atom_graph();
        let b = batch_graphs(&[g.clone(), g]).unwrap();
        let e = model.forward(&params, &b).unwrap();
        assert_eq!(e.shape(), &[2]);
        assert_eq!(e.data()[0].to_bits(), e.data()[1].to_bits());
    }

    #[test]
    fn missing_features_are_errors() {
        let model = tiny();
        let params = model.init_params(1);
        let g = FeatureGraph::new(1, vec![], vec![]).unwrap();
        assert!(model.forward(&params, &g).is_err());
        let g = two_atom_graph()
            .set_feature(
                Domain::Node,
                "atomic_numbers",
                Tensor::vector([0.0, 1.0, 1.0]),
            )
            .unwrap();
        assert!(matches!(
            model.forward(&params, &g),
            Err(ModelError::AtomicNumber(_))
        ));
    }

    #[test]
    fn reference_config_parameter_count() {
        let model = Egnn::new(EgnnConfig::default()).unwrap();
        let n = model.init_params(0).num_scalars();
        assert_eq!(n, 82_164);
    }
}
