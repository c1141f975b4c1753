use std::path::{Path, PathBuf};

use super::checkpoint::{save_checkpoint, Checkpoint, TrainState};
use super::{TrainerConfig, TrainerError};
use crate::models::EnergyModel;
use crate::tasks::{GraphSettings, Metrics, TaskKind};

/// Points in the training loop where callbacks run, in causal order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallbackEvent {
    FitStart,
    TrainBatchEnd,
    TrainEpochEnd,
    ValidationEpochEnd,
    FitEnd,
}

/// Read-only view of the run handed to callbacks.
pub struct RunState<'a> {
    /// Zero-based index of the current (or just finished) epoch.
    pub epoch: usize,
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Learning rate used during `epoch`.
    pub lr: f64,
    pub batch_loss: Option<f64>,
    pub train: Option<Metrics>,
    pub val: Option<Metrics>,
    pub epoch_time_s: Option<f64>,
    pub task: TaskKind,
    pub graph: GraphSettings,
    pub config: &'a TrainerConfig,
    pub model: &'a dyn EnergyModel,
    pub state: &'a TrainState,
}

impl RunState<'_> {
    /// Value of a monitor name (see [`super::MONITORS`]), if known yet.
    pub fn monitor(&self, name: &str) -> Option<f64> {
        match name {
            "val_loss" => self.val.map(|m| m.loss()),
            "val_energy_mae_ev" => self.val.map(|m| m.energy_mae_ev),
            "val_force_mae_ev_per_ang" => self.val.and_then(|m| m.force_mae_ev_per_ang),
            "train_loss" => self.train.map(|m| m.loss()),
            "train_energy_mae_ev" => self.train.map(|m| m.energy_mae_ev),
            _ => None,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_kind: self.model.kind().to_string(),
            model_config: self.model.config_json(),
            trainer_config: self.config.clone(),
            task: self.task,
            graph: self.graph,
            state: self.state.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Hooks into the training loop. All run on the coordinator only.
///
/// Returning [`Control::Stop`] ends training after the current epoch.
pub trait Callback: Send {
    fn on_fit_start(&mut self, _run: &RunState) -> Result<Control, TrainerError> {
        Ok(Control::Continue)
    }
    fn on_train_batch_end(&mut self, _run: &RunState) -> Result<Control, TrainerError> {
        Ok(Control::Continue)
    }
    fn on_train_epoch_end(&mut self, _run: &RunState) -> Result<Control, TrainerError> {
        Ok(Control::Continue)
    }
    fn on_validation_epoch_end(&mut self, _run: &RunState) -> Result<Control, TrainerError> {
        Ok(Control::Continue)
    }
    fn on_fit_end(&mut self, _run: &RunState) -> Result<Control, TrainerError> {
        Ok(Control::Continue)
    }
    /// Files this callback wrote, reported in the run summary.
    fn outputs(&self) -> Vec<PathBuf> {
        Vec::new()
    }
}

/// Whether to stop after the last entry of `history`: true once the value
/// has failed to strictly improve on the best so far `patience + 1` times
/// in a row.
pub fn early_stopping(history: &[f64], patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for &v in history {
        if v < best {
            best = v;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale > patience
}

pub struct EarlyStopping {
    pub monitor: String,
    pub patience: usize,
    history: Vec<f64>,
    /// Epoch after which training was stopped.
    pub stopped_epoch: Option<usize>,
}

impl EarlyStopping {
    pub fn new(monitor: impl Into<String>, patience: usize) -> Self {
        EarlyStopping {
            monitor: monitor.into(),
            patience,
            history: Vec::new(),
            stopped_epoch: None,
        }
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }
}

impl Callback for EarlyStopping {
    fn on_validation_epoch_end(&mut self, run: &RunState) -> Result<Control, TrainerError> {
        let value = run.monitor(&self.monitor).ok_or_else(|| {
            TrainerError::Config(format!("monitor '{}' has no value", self.monitor))
        })?;
        // NaN never counts as an improvement
        self.history
            .push(if value.is_nan() { f64::INFINITY } else { value });
        if early_stopping(&self.history, self.patience) {
            self.stopped_epoch = Some(run.epoch);
            return Ok(Control::Stop);
        }
        Ok(Control::Continue)
    }
}

/// Writes `last.ckpt` after every epoch and `best.ckpt` whenever the
/// monitored value improves.
pub struct ModelCheckpoint {
    pub dir: PathBuf,
    pub monitor: String,
    best: f64,
    written: Vec<PathBuf>,
}

impl ModelCheckpoint {
    pub fn new(dir: impl Into<PathBuf>, monitor: impl Into<String>) -> Self {
        ModelCheckpoint {
            dir: dir.into(),
            monitor: monitor.into(),
            best: f64::INFINITY,
            written: Vec::new(),
        }
    }

    pub fn last_path(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    fn save(&mut self, checkpoint: &Checkpoint, path: &Path) -> Result<(), TrainerError> {
        save_checkpoint(checkpoint, path)?;
        if !self.written.iter().any(|p| p == path) {
            self.written.push(path.to_path_buf());
        }
        Ok(())
    }
}

impl Callback for ModelCheckpoint {
    fn on_fit_start(&mut self, _run: &RunState) -> Result<Control, TrainerError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| TrainerError::io(&self.dir, e))?;
        Ok(Control::Continue)
    }

    fn on_validation_epoch_end(&mut self, run: &RunState) -> Result<Control, TrainerError> {
        let ckpt = run.checkpoint();
        self.save(&ckpt, &self.last_path())?;
        if let Some(v) = run.monitor(&self.monitor) {
            if v < self.best {
                self.best = v;
                self.save(&ckpt, &self.best_path())?;
            }
        }
        Ok(Control::Continue)
    }

    fn outputs(&self) -> Vec<PathBuf> {
        self.written.clone()
    }
}
