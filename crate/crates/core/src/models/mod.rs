//! Energy models: anything that maps a batched feature graph to one scalar
//! energy per graph, differentiably in its parameters and node positions.

mod egnn;

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use egnn::{egnn_layer, Activation, Egnn, EgnnConfig, Readout};

use crate::graph::{FeatureGraph, GraphError};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("atomic number {0} is outside the embedding table")]
    AtomicNumber(f64),
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Named parameter tensors in a stable (sorted) order.
#[derive(Debug, Clone, Default)]
pub struct ParamMap(BTreeMap<String, Tensor>);

impl ParamMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.0
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn track(&self, tape: &Tape) -> ParamMap {
        ParamMap(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), v.track(tape)))
                .collect(),
        )
    }

    pub fn detach(&self) -> ParamMap {
        ParamMap(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), v.detach()))
                .collect(),
        )
    }

    /// Concatenation of all values in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in self.0.values() {
            out.extend_from_slice(v.data());
        }
        out
    }

    /// Same names and shapes as `self`, filled from `flat` in name order.
    pub fn with_values(&self, flat: &[f64]) -> Result<ParamMap, TensorError> {
        if flat.len() != self.num_scalars() {
            return Err(TensorError::DataLength {
                len: flat.len(),
                shape: vec![self.num_scalars()],
            });
        }
        let mut off = 0;
        let mut out = BTreeMap::new();
        for (k, v) in &self.0 {
            let n = v.numel();
            out.insert(
                k.clone(),
                Tensor::new(v.shape().to_vec(), flat[off..off + n].to_vec())?,
            );
            off += n;
        }
        Ok(ParamMap(out))
    }

    pub fn bit_eq(&self, other: &ParamMap) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    pub fn max_abs_diff(&self, other: &ParamMap) -> Option<f64> {
        if !self.0.keys().eq(other.0.keys()) {
            return None;
        }
        self.0
            .values()
            .zip(other.0.values())
            .map(|(a, b)| a.max_abs_diff(b))
            .try_fold(0.0f64, |acc, d| d.map(|d| acc.max(d)))
    }
}

impl FromIterator<(String, Tensor)> for ParamMap {
    fn from_iter<T: IntoIterator<Item = (String, Tensor)>>(iter: T) -> Self {
        ParamMap(iter.into_iter().collect())
    }
}

/// Shape and initialisation rule of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    UniformFanIn(usize),
}

/// Draws parameters in spec order from a seeded stream.
pub fn init_from_specs(specs: &[ParamSpec], seed: u64) -> ParamMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs
        .iter()
        .map(|spec| {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::UniformFanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                }
            };
            let t = Tensor::new(spec.shape.clone(), data).expect("spec shape matches data");
            (spec.name.clone(), t)
        })
        .collect()
}

/// A model that predicts one energy per graph of a batch.
pub trait EnergyModel: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Every parameter the model reads, in initialisation order.
    fn param_specs(&self) -> Vec<ParamSpec>;

    fn init_params(&self, seed: u64) -> ParamMap {
        init_from_specs(&self.param_specs(), seed)
    }

    /// Energies with shape `(num_graphs,)`.
    fn forward(&self, params: &ParamMap, batch: &FeatureGraph) -> Result<Tensor, ModelError>;

    fn config_json(&self) -> serde_json::Value;

    /// Checks names and shapes of `params` against [`EnergyModel::param_specs`].
    fn check_params(&self, params: &ParamMap) -> Result<(), ModelError> {
        let specs = self.param_specs();
        if specs.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in specs {
            let t = params.get(&spec.name)?;
            if t.shape() != spec.shape {
                return Err(ModelError::Config(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}

/// Dense layer stack `dims[0] -> dims[1] -> ... -> dims[n]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub activate_last: bool,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>, activate_last: bool) -> Self {
        Mlp {
            prefix: prefix.into(),
            dims,
            activate_last,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (k, w) in self.dims.windows(2).enumerate() {
            out.push(ParamSpec {
                name: format!("{}.{k}.weight", self.prefix),
                shape: vec![w[0], w[1]],
                init: Init::UniformFanIn(w[0]),
            });
            out.push(ParamSpec {
                name: format!("{}.{k}.bias", self.prefix),
                shape: vec![w[1]],
                init: Init::Zeros,
            });
        }
        out
    }

    pub fn forward(&self, params: &ParamMap, x: &Tensor) -> Result<Tensor, ModelError> {
        let layers = self.dims.len() - 1;
        let mut h = x.clone();
        for k in 0..layers {
            let w = params.get(&format!("{}.{k}.weight", self.prefix))?;
            let b = params.get(&format!("{}.{k}.bias", self.prefix))?;
            h = h.matmul(w)?.add(b)?;
            if k + 1 < layers || self.activate_last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}
