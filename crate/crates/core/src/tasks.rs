//! IS2RE and S2EF task heads: losses, forces as energy gradients, target
//! normalization and evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{batch_graphs, radius_graph, Domain, FeatureGraph, GraphError};
use crate::models::{EnergyModel, ModelError, ParamMap};
use crate::structures::AtomicStructure;
use crate::tensor::{grad, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("{what}: length {got} does not match {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("record {id} has no {label} label")]
    MissingLabel { id: String, label: &'static str },
    #[error("positions are not recorded on a tape")]
    PositionsNotTracked,
    #[error("invalid normalizer: {0}")]
    Normalizer(String),
    #[error("unknown task '{0}' (expected is2re or s2ef)")]
    UnknownTask(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "is2re")]
    IS2RE,
    #[serde(rename = "s2ef")]
    S2EF,
}

impl TaskKind {
    pub fn uses_forces(self) -> bool {
        self == TaskKind::S2EF
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::IS2RE => "is2re",
            TaskKind::S2EF => "s2ef",
        })
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, TaskError> {
        match s.to_ascii_lowercase().as_str() {
            "is2re" => Ok(TaskKind::IS2RE),
            "s2ef" => Ok(TaskKind::S2EF),
            _ => Err(TaskError::UnknownTask(s.to_string())),
        }
    }
}

/// Z-score for energies; forces are divided by `std` only, so normalized
/// forces stay the negative gradient of normalized energies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl Normalizer {
    pub fn new(mean: f64, std: f64) -> Result<Self, TaskError> {
        if !mean.is_finite() || !(std > 0.0) || !std.is_finite() {
            return Err(TaskError::Normalizer(format!("mean {mean}, std {std}")));
        }
        Ok(Normalizer { mean, std })
    }

    /// Mean and population std of `energies`; a zero spread falls back to std 1.
    pub fn fit(energies: &[f64]) -> Result<Self, TaskError> {
        if energies.is_empty() {
            return Err(TaskError::Empty("normalizer fit set"));
        }
        let n = energies.len() as f64;
        let mean = energies.iter().sum::<f64>() / n;
        let var = energies.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Normalizer::new(mean, std)
    }

    pub fn from_structures(train: &[AtomicStructure]) -> Result<Self, TaskError> {
        let energies = train
            .iter()
            .map(|s| {
                s.energy.ok_or_else(|| TaskError::MissingLabel {
                    id: s.id.clone(),
                    label: "energy",
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Normalizer::fit(&energies)
    }

    pub fn normalize(&self, energy: f64) -> f64 {
        (energy - self.mean) / self.std
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        value * self.std + self.mean
    }

    pub fn normalize_force(&self, force: f64) -> f64 {
        force / self.std
    }

    pub fn denormalize_force(&self, value: f64) -> f64 {
        value * self.std
    }
}

fn check_same_shape(what: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TaskError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: what,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Mean absolute error between predicted and target energies.
pub fn is2re_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor, TaskError> {
    if pred.numel() != target.numel() {
        return Err(TaskError::Length {
            what: "energy targets",
            expected: pred.numel(),
            got: target.numel(),
        });
    }
    if pred.numel() == 0 {
        return Err(TaskError::Empty("energy predictions"));
    }
    check_same_shape("is2re_loss", pred, target)?;
    Ok(pred.sub(target)?.abs()?.mean()?)
}

/// Energy MAE plus per-component force MAE, unit weights.
pub fn s2ef_loss(
    pred_e: &Tensor,
    target_e: &Tensor,
    pred_f: &Tensor,
    target_f: &Tensor,
) -> Result<Tensor, TaskError> {
    check_same_shape("s2ef_loss forces", pred_f, target_f)?;
    if pred_f.numel() == 0 {
        return Err(TaskError::Empty("force predictions"));
    }
    let energy = is2re_loss(pred_e, target_e)?;
    let force = pred_f.sub(target_f)?.abs()?.mean()?;
    Ok(energy.add(&force)?)
}

/// Predicted energies (one per graph) and forces (`N_total x 3`).
#[derive(Debug, Clone)]
pub struct EnergyForces {
    pub energies: Tensor,
    pub forces: Tensor,
}

/// Forces as `-d(sum E)/dx` with respect to the batch's `pos` feature.
///
/// `pos` must already be recorded on a tape. With `training` set the
/// gradient is itself recorded, so a loss on the forces can be
/// differentiated with respect to the parameters.
pub fn predict_forces(
    model: &dyn EnergyModel,
    params: &ParamMap,
    batch: &FeatureGraph,
    training: bool,
) -> Result<EnergyForces, TaskError> {
    let pos = batch.node("pos")?;
    if !pos.is_tracked() {
        return Err(TaskError::PositionsNotTracked);
    }
    let energies = model.forward(params, batch)?;
    let total = energies.sum()?;
    let mut g = grad(&total, &[pos], training)?;
    let forces = g.pop().expect("one gradient per input").neg()?;
    Ok(EnergyForces { energies, forces })
}

/// Copy of `batch` whose `pos` feature is a fresh leaf on `tape`.
pub fn track_positions(batch: &FeatureGraph, tape: &Tape) -> Result<FeatureGraph, TaskError> {
    let pos = batch.node("pos")?.detach().track(tape);
    Ok(batch.clone().set_feature(Domain::Node, "pos", pos)?)
}

/// Neighbour-list settings used when turning structures into graphs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphSettings {
    pub cutoff: f64,
    pub max_neighbors: usize,
}

impl Default for GraphSettings {
    fn default() -> Self {
        GraphSettings {
            cutoff: crate::graph::DEFAULT_CUTOFF,
            max_neighbors: crate::graph::DEFAULT_MAX_NEIGHBORS,
        }
    }
}

/// A split with graphs built once and labels checked for the task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: TaskKind,
    pub settings: GraphSettings,
    pub structures: Vec<AtomicStructure>,
    pub graphs: Vec<FeatureGraph>,
    pub energies: Vec<f64>,
}

impl TaskData {
    pub fn new(
        structures: Vec<AtomicStructure>,
        task: TaskKind,
        settings: GraphSettings,
    ) -> Result<Self, TaskError> {
        let mut graphs = Vec::with_capacity(structures.len());
        let mut energies = Vec::with_capacity(structures.len());
        for s in &structures {
            let energy = s.energy.ok_or_else(|| TaskError::MissingLabel {
                id: s.id.clone(),
                label: "energy",
            })?;
            if task.uses_forces() && s.forces.is_none() {
                return Err(TaskError::MissingLabel {
                    id: s.id.clone(),
                    label: "forces",
                });
            }
            graphs.push(radius_graph(s, settings.cutoff, settings.max_neighbors)?);
            energies.push(energy);
        }
        Ok(TaskData {
            task,
            settings,
            structures,
            graphs,
            energies,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn num_atoms(&self, index: usize) -> usize {
        self.graphs[index].num_nodes()
    }

    fn force_labels(&self, index: usize) -> &[[f64; 3]] {
        self.structures[index]
            .forces
            .as_deref()
            .expect("force labels checked on construction")
    }

    /// Batched graph and normalized targets for the records at `indices`.
    pub fn batch(
        &self,
        indices: &[usize],
        normalizer: &Normalizer,
    ) -> Result<TaskBatch, TaskError> {
        if indices.is_empty() {
            return Err(TaskError::Empty("batch"));
        }
        let parts: Vec<FeatureGraph> = indices.iter().map(|&i| self.graphs[i].clone()).collect();
        let graph = batch_graphs(&parts)?;
        let energies = Tensor::vector(
            indices
                .iter()
                .map(|&i| normalizer.normalize(self.energies[i]))
                .collect::<Vec<_>>(),
        );
        let forces = if self.task.uses_forces() {
            let rows: Vec<[f64; 3]> = indices
                .iter()
                .flat_map(|&i| self.force_labels(i).iter())
                .map(|f| f.map(|v| normalizer.normalize_force(v)))
                .collect();
            Some(Tensor::from_rows3(&rows))
        } else {
            None
        };
        Ok(TaskBatch {
            graph,
            energies,
            forces,
        })
    }
}

/// Model inputs and normalized targets for one step.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub graph: FeatureGraph,
    pub energies: Tensor,
    pub forces: Option<Tensor>,
}

impl TaskBatch {
    pub fn num_samples(&self) -> usize {
        self.energies.numel()
    }

    pub fn num_force_components(&self) -> usize {
        self.forces.as_ref().map_or(0, Tensor::numel)
    }
}

/// Loss of one (micro-)batch together with its error sums in normalized units.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub loss: Tensor,
    pub energy_abs_sum: f64,
    pub force_abs_sum: f64,
}

/// Denominators for the energy and force terms of a loss.
///
/// A data-parallel worker passes the global batch totals so that the sum of
/// shard losses equals the full-batch mean loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossScale {
    pub energy: f64,
    pub force: f64,
}

impl LossScale {
    pub fn for_batch(batch: &TaskBatch) -> Self {
        LossScale {
            energy: batch.num_samples() as f64,
            force: batch.num_force_components().max(1) as f64,
        }
    }
}

/// Training loss of `batch`. Parameters should already be tracked on `tape`.
pub fn batch_loss(
    model: &dyn EnergyModel,
    params: &ParamMap,
    batch: &TaskBatch,
    tape: &Tape,
    scale: LossScale,
) -> Result<LossTerms, TaskError> {
    match &batch.forces {
        None => {
            let pred = model.forward(params, &batch.graph)?;
            check_same_shape("energy loss", &pred, &batch.energies)?;
            let abs = pred.sub(&batch.energies)?.abs()?.sum()?;
            Ok(LossTerms {
                energy_abs_sum: abs.item()?,
                force_abs_sum: 0.0,
                loss: abs.scale(1.0 / scale.energy)?,
            })
        }
        Some(target_f) => {
            let graph = track_positions(&batch.graph, tape)?;
            let out = predict_forces(model, params, &graph, true)?;
            check_same_shape("energy loss", &out.energies, &batch.energies)?;
            check_same_shape("force loss", &out.forces, target_f)?;
            let e_abs = out.energies.sub(&batch.energies)?.abs()?.sum()?;
            let f_abs = out.forces.sub(target_f)?.abs()?.sum()?;
            Ok(LossTerms {
                energy_abs_sum: e_abs.item()?,
                force_abs_sum: f_abs.item()?,
                loss: e_abs
                    .scale(1.0 / scale.energy)?
                    .add(&f_abs.scale(1.0 / scale.force)?)?,
            })
        }
    }
}

/// De-normalized error metrics of a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub energy_mae_ev: f64,
    pub force_mae_ev_per_ang: Option<f64>,
}

impl Metrics {
    /// The quantity early stopping and the learning checks track.
    pub fn loss(&self) -> f64 {
        self.energy_mae_ev + self.force_mae_ev_per_ang.unwrap_or(0.0)
    }
}

/// Energy (and force) MAE of `model` on `data`, in eV and eV/Å.
///
/// Runs in batches of `batch_size` with no parameter updates.
pub fn evaluate(
    model: &dyn EnergyModel,
    params: &ParamMap,
    data: &TaskData,
    normalizer: &Normalizer,
    batch_size: usize,
) -> Result<Metrics, TaskError> {
    if data.is_empty() {
        return Err(TaskError::Empty("evaluation split"));
    }
    let params = params.detach();
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut e_sum = 0.0;
    let mut f_sum = 0.0;
    let mut f_count = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let parts: Vec<FeatureGraph> = chunk.iter().map(|&i| data.graphs[i].clone()).collect();
        let graph = batch_graphs(&parts)?;
        let energies = if data.task.uses_forces() {
            let tape = Tape::new();
            let graph = track_positions(&graph, &tape)?;
            let out = predict_forces(model, &params, &graph, false)?;
            let mut row = 0;
            for &i in chunk {
                let labels = data.force_labels(i);
                for label in labels {
                    for k in 0..3 {
                        let pred = normalizer.denormalize_force(out.forces.data()[row * 3 + k]);
                        f_sum += (pred - label[k]).abs();
                    }
                    row += 1;
                }
                f_count += 3 * labels.len();
            }
            out.energies
        } else {
            model.forward(&params, &graph)?
        };
        for (&i, &pred) in chunk.iter().zip(energies.data()) {
            e_sum += (normalizer.denormalize(pred) - data.energies[i]).abs();
        }
    }
    Ok(Metrics {
        energy_mae_ev: e_sum / data.len() as f64,
        force_mae_ev_per_ang: data
            .task
            .uses_forces()
            .then(|| f_sum / f_count.max(1) as f64),
    })
}
