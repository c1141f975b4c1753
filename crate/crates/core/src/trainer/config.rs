use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "single")]
    Single,
    #[serde(rename = "threaded-ddp")]
    ThreadedDdp,
    #[serde(rename = "process-ddp")]
    ProcessDdp,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Single => "single",
            Strategy::ThreadedDdp => "threaded-ddp",
            Strategy::ProcessDdp => "process-ddp",
        })
    }
}

impl FromStr for Strategy {
    type Err = TrainerError;

    fn from_str(s: &str) -> Result<Self, TrainerError> {
        match s {
            "single" => Ok(Strategy::Single),
            "threaded-ddp" => Ok(Strategy::ThreadedDdp),
            "process-ddp" => Ok(Strategy::ProcessDdp),
            _ => Err(TrainerError::Config(format!(
                "unknown strategy '{s}' (expected single, threaded-ddp or process-ddp)"
            ))),
        }
    }
}

/// Quantities early stopping and best-checkpoint selection can track.
pub const MONITORS: [&str; 5] = [
    "val_loss",
    "val_energy_mae_ev",
    "val_force_mae_ev_per_ang",
    "train_loss",
    "train_energy_mae_ev",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopConfig {
    #[serde(default = "default_monitor")]
    pub monitor: String,
    pub patience: usize,
}

fn default_monitor() -> String {
    "val_loss".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Number of data-parallel workers.
    pub devices: usize,
    pub strategy: Strategy,
    pub accumulate_grad_batches: usize,
    pub learning_rate: f64,
    /// Per-epoch learning-rate decay factor.
    pub gamma: f64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub early_stop: Option<EarlyStopConfig>,
    /// Seconds a process-ddp worker waits on a peer before aborting.
    pub comm_timeout_s: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            max_epochs: 50,
            batch_size: 8,
            devices: 1,
            strategy: Strategy::Single,
            accumulate_grad_batches: 1,
            learning_rate: 0.003626,
            gamma: 0.6878,
            seed: 0,
            checkpoint_dir: None,
            log_path: None,
            early_stop: None,
            comm_timeout_s: 30.0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let fail = |msg: String| Err(TrainerError::Config(msg));
        if self.devices == 0 {
            return fail("devices must be at least 1".into());
        }
        if self.strategy == Strategy::Single && self.devices != 1 {
            return fail(format!(
                "strategy single runs on one device, got devices = {}",
                self.devices
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.accumulate_grad_batches == 0 {
            return fail("accumulate_grad_batches must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.comm_timeout_s > 0.0) {
            return fail("comm_timeout_s must be positive".into());
        }
        if let Some(es) = &self.early_stop {
            if !MONITORS.contains(&es.monitor.as_str()) {
                return fail(format!(
                    "unknown monitor '{}' (expected one of {})",
                    es.monitor,
                    MONITORS.join(", ")
                ));
            }
        }
        Ok(())
    }
}
