//! Machine-learning pipeline for catalyst + adsorbate systems.
//!
//! The crate is layered the same way data flows through a run:
//!
//! - [`tensor`]: dense `f64` tensors with reverse-mode differentiation,
//!   including gradients of gradients.
//! - [`structures`]: atomic structure records, JSON-Lines datasets, seeded
//!   splits and miniature devsets, plus a synthetic data generator.
//! - [`graph`]: feature graphs with size-checked node/edge stores, radius
//!   graphs and batching.
//! - [`pointcloud`]: adsorbate/surface-centred point clouds with padded,
//!   masked batching.
//! - [`models`]: the energy-model interface and an E(n)-equivariant GNN.
//! - [`tasks`]: relaxed-energy and energy+force losses, force prediction and
//!   evaluation metrics.
//! - [`trainer`]: the training loop, callbacks, CSV logging, checkpoints and
//!   data-parallel gradient synchronisation.

pub mod graph;
pub mod models;
pub mod pointcloud;
pub mod structures;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use tensor::{grad, Tape, Tensor, TensorError};

/// Largest atomic number accepted anywhere in the pipeline.
pub const Z_MAX: usize = 100;
