//! Training orchestration: the epoch loop, callbacks, CSV logging,
//! checkpoints, gradient accumulation, Adam with per-epoch decay, and
//! threaded or multi-process data parallelism.

mod callbacks;
mod checkpoint;
pub mod comm;
mod config;
mod fit;
mod logger;
mod optim;
pub mod process;

use std::path::{Path, PathBuf};

pub use callbacks::{
    early_stopping, Callback, CallbackEvent, Control, EarlyStopping, ModelCheckpoint, RunState,
};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, TrainState,
    CHECKPOINT_VERSION,
};
pub use comm::{allreduce_mean, allreduce_mean_flat, CommError, Ring};
pub use config::{EarlyStopConfig, Strategy, TrainerConfig, MONITORS};
pub use fit::{
    epoch_order, scaling_benchmark, shard_ranges, EpochRecord, ScalingRow, TaskRun, Trainer,
};
pub use logger::{csv_row, CsvLogger, CSV_HEADER};
pub use optim::Adam;

use crate::models::ModelError;
use crate::structures::StructureError;
use crate::tasks::TaskError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (step {step})")]
    NonFinite {
        loss: f64,
        epoch: usize,
        batch: usize,
        step: u64,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("worker failure: {0}")]
    Worker(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Structure(#[from] StructureError),
}

impl TrainerError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainerError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
