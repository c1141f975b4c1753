//! Single-file checkpoints: magic bytes, a length-prefixed JSON header, then
//! little-endian `f64` payloads in header order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Adam, TrainerConfig, TrainerError};
use crate::models::{EnergyModel, ParamMap};
use crate::tasks::{GraphSettings, Normalizer, TaskKind};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SURFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue training after an epoch boundary.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamMap,
    pub adam: Adam,
    /// Next epoch to run (number of completed epochs).
    pub epoch: usize,
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Learning rate for the next epoch.
    pub lr: f64,
    pub normalizer: Normalizer,
}

impl TrainState {
    pub fn fresh(params: ParamMap, lr: f64, normalizer: Normalizer) -> Self {
        TrainState {
            adam: Adam::new(params.num_scalars()),
            params,
            epoch: 0,
            step: 0,
            lr,
            normalizer,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_kind: String,
    pub model_config: serde_json::Value,
    pub trainer_config: TrainerConfig,
    pub task: TaskKind,
    pub graph: GraphSettings,
    pub state: TrainState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub path: PathBuf,
    pub epoch: usize,
    pub num_tensors: usize,
    pub bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model_kind: String,
    model_config: serde_json::Value,
    trainer_config: TrainerConfig,
    task: TaskKind,
    graph: GraphSettings,
    normalizer: Normalizer,
    epoch: usize,
    step: u64,
    lr: f64,
    adam: Adam,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

fn corrupt(msg: impl Into<String>) -> TrainerError {
    TrainerError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::with_capacity(3 * s.params.num_scalars());
        // moments are stored per tensor, split along the flat parameter order
        let mut offset = 0;
        let mut moments = Vec::new();
        for (name, t) in s.params.iter() {
            moments.push((name, t.shape(), offset));
            offset += t.numel();
        }
        for group in GROUPS {
            for &(name, shape, off) in &moments {
                let n: usize = shape.iter().product();
                tensors.push(TensorEntry {
                    name: name.clone(),
                    group: group.to_string(),
                    shape: shape.to_vec(),
                });
                match group {
                    "param" => payload.extend_from_slice(s.params.get(name).unwrap().data()),
                    "adam_m" => payload.extend_from_slice(&s.adam.m[off..off + n]),
                    _ => payload.extend_from_slice(&s.adam.v[off..off + n]),
                }
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            model_kind: self.model_kind.clone(),
            model_config: self.model_config.clone(),
            trainer_config: self.trainer_config.clone(),
            task: self.task,
            graph: self.graph,
            normalizer: s.normalizer,
            epoch: s.epoch,
            step: s.step,
            lr: s.lr,
            adam: s.adam.clone(),
            rng: RngState {
                seed: self.trainer_config.seed,
                epoch: s.epoch,
            },
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainerError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| corrupt("truncated header"))?;
        let value: serde_json::Value =
            serde_json::from_slice(body).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(corrupt(format!(
                "unsupported checkpoint version {version:?}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let header: Header =
            serde_json::from_value(value).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let data = &bytes[16 + len..];
        let total: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if data.len() != 8 * total {
            return Err(corrupt(format!(
                "payload holds {} bytes, header describes {}",
                data.len(),
                8 * total
            )));
        }
        let mut values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut params = ParamMap::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let chunk: Vec<f64> = values.by_ref().take(n).collect();
            match entry.group.as_str() {
                "param" => params.insert(
                    entry.name.clone(),
                    Tensor::new(entry.shape.clone(), chunk)
                        .map_err(|e| corrupt(format!("tensor '{}': {e}", entry.name)))?,
                ),
                "adam_m" => m.extend(chunk),
                "adam_v" => v.extend(chunk),
                other => return Err(corrupt(format!("unknown tensor group '{other}'"))),
            }
        }
        if m.len() != params.num_scalars() || v.len() != params.num_scalars() {
            return Err(corrupt("optimizer moments do not match the parameters"));
        }
        let mut adam = header.adam;
        adam.m = m;
        adam.v = v;
        Ok(Checkpoint {
            model_kind: header.model_kind,
            model_config: header.model_config,
            trainer_config: header.trainer_config,
            task: header.task,
            graph: header.graph,
            state: TrainState {
                params,
                adam,
                epoch: header.epoch,
                step: header.step,
                lr: header.lr,
                normalizer: header.normalizer,
            },
        })
    }

    /// Fails naming the first tensor whose name or shape `model` does not expect.
    pub fn check_model(&self, model: &dyn EnergyModel) -> Result<(), TrainerError> {
        if self.model_kind != model.kind() {
            return Err(TrainerError::Checkpoint(format!(
                "checkpoint holds a '{}' model, expected '{}'",
                self.model_kind,
                model.kind()
            )));
        }
        let specs = model.param_specs();
        for spec in &specs {
            match self.state.params.get(&spec.name) {
                Err(_) => {
                    return Err(TrainerError::Checkpoint(format!(
                        "tensor '{}' is missing from the checkpoint",
                        spec.name
                    )))
                }
                Ok(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(TrainerError::Checkpoint(format!(
                        "tensor '{}' has shape {:?} in the checkpoint, model expects {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                Ok(_) => {}
            }
        }
        if let Some(extra) = self
            .state
            .params
            .names()
            .find(|n| !specs.iter().any(|s| &s.name == *n))
        {
            return Err(TrainerError::Checkpoint(format!(
                "tensor '{extra}' in the checkpoint is not a model parameter"
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    checkpoint: &Checkpoint,
    path: impl AsRef<Path>,
) -> Result<CheckpointManifest, TrainerError> {
    let path = path.as_ref();
    let bytes = checkpoint.to_bytes();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| TrainerError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| TrainerError::io(path, e))?;
    Ok(CheckpointManifest {
        path: path.to_path_buf(),
        epoch: checkpoint.state.epoch,
        num_tensors: checkpoint.state.params.len(),
        bytes: bytes.len() as u64,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainerError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TrainerError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
