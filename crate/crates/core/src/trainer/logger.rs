use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::callbacks::{Callback, Control, RunState};
use super::TrainerError;
use crate::tasks::Metrics;

pub const CSV_HEADER: &str = "epoch,step,split,energy_mae_ev,force_mae_ev_per_ang,lr,epoch_time_s";

/// One metrics row. Floats use the shortest representation that reads back
/// to the same value (scientific notation for very small or large values).
pub fn csv_row(
    epoch: usize,
    step: u64,
    split: &str,
    metrics: &Metrics,
    lr: f64,
    epoch_time_s: Option<f64>,
) -> String {
    let force = metrics
        .force_mae_ev_per_ang
        .map(|v| format!("{v:?}"))
        .unwrap_or_default();
    let time = epoch_time_s.map(|v| format!("{v:?}")).unwrap_or_default();
    format!(
        "{epoch},{step},{split},{:?},{force},{lr:?},{time}",
        metrics.energy_mae_ev
    )
}

/// Appends one validation row per epoch to `path` and the matching training
/// row to a sibling file prefixed with `train_`.
pub struct CsvLogger {
    path: PathBuf,
    train_path: PathBuf,
    files: Option<(File, File)>,
}

impl CsvLogger {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "metrics.csv".into());
        let train_path = path.with_file_name(format!("train_{name}"));
        CsvLogger {
            path,
            train_path,
            files: None,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn train_path(&self) -> &Path {
        &self.train_path
    }

    fn open(path: &Path, resume: bool) -> Result<File, TrainerError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| TrainerError::io(dir, e))?;
        }
        let append = resume && path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| TrainerError::io(path, e))?;
        if !append {
            writeln!(file, "{CSV_HEADER}").map_err(|e| TrainerError::io(path, e))?;
        }
        Ok(file)
    }
}

impl Callback for CsvLogger {
    fn on_fit_start(&mut self, run: &RunState) -> Result<Control, TrainerError> {
        let resume = run.state.epoch > 0;
        self.files = Some((
            Self::open(&self.path, resume)?,
            Self::open(&self.train_path, resume)?,
        ));
        Ok(Control::Continue)
    }

    fn on_validation_epoch_end(&mut self, run: &RunState) -> Result<Control, TrainerError> {
        let (val_file, train_file) = self
            .files
            .as_mut()
            .ok_or_else(|| TrainerError::Config("logger used before fit start".into()))?;
        if let Some(m) = &run.val {
            let row = csv_row(run.epoch, run.step, "val", m, run.lr, run.epoch_time_s);
            writeln!(val_file, "{row}").map_err(|e| TrainerError::io(&self.path, e))?;
        }
        if let Some(m) = &run.train {
            let row = csv_row(run.epoch, run.step, "train", m, run.lr, run.epoch_time_s);
            writeln!(train_file, "{row}").map_err(|e| TrainerError::io(&self.train_path, e))?;
        }
        Ok(Control::Continue)
    }

    fn on_fit_end(&mut self, _run: &RunState) -> Result<Control, TrainerError> {
        self.files = None;
        Ok(Control::Continue)
    }

    fn outputs(&self) -> Vec<PathBuf> {
        vec![self.path.clone(), self.train_path.clone()]
    }
}
