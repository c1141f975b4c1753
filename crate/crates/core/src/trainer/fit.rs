use std::ops::Range;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::callbacks::{
    Callback, CallbackEvent, Control, EarlyStopping, ModelCheckpoint, RunState,
};
use super::checkpoint::{Checkpoint, TrainState};
use super::comm::{allreduce_mean_flat, Ring};
use super::logger::CsvLogger;
use super::process::{Cluster, CommandLauncher, WorkerLauncher};
use super::{Strategy, TrainerConfig, TrainerError};
use crate::models::{EnergyModel, ParamMap};
use crate::tasks::{batch_loss, evaluate, LossScale, Metrics, Normalizer, TaskData};
use crate::tensor::{grad, Tape, Tensor};

/// Shuffled sample order for one epoch, derived from `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Contiguous shards of `n` items; the last worker takes the remainder.
pub fn shard_ranges(n: usize, workers: usize) -> Vec<Range<usize>> {
    let base = n / workers;
    (0..workers)
        .map(|w| {
            let start = w * base;
            let end = if w + 1 == workers { n } else { start + base };
            start..end
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train: Metrics,
    pub val: Option<Metrics>,
    pub epoch_time_s: f64,
}

/// Outcome of [`Trainer::fit`].
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub checkpoints: Vec<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl TaskRun {
    pub fn final_train(&self) -> Option<Metrics> {
        self.history.last().map(|r| r.train)
    }

    pub fn final_val(&self) -> Option<Metrics> {
        self.history.last().and_then(|r| r.val)
    }
}

struct StepResult {
    grad: Vec<f64>,
    loss: f64,
    energy_abs: f64,
    force_abs: f64,
}

impl StepResult {
    fn zeros(n: usize) -> Self {
        StepResult {
            grad: vec![0.0; n],
            loss: 0.0,
            energy_abs: 0.0,
            force_abs: 0.0,
        }
    }

    /// Gradient and statistics times `factor`, as one buffer.
    fn pack(self, factor: f64) -> Vec<f64> {
        let mut buf = self.grad;
        buf.extend([self.loss, self.energy_abs, self.force_abs]);
        for v in &mut buf {
            *v *= factor;
        }
        buf
    }

    fn unpack(mut buf: Vec<f64>) -> Self {
        let force_abs = buf.pop().unwrap();
        let energy_abs = buf.pop().unwrap();
        let loss = buf.pop().unwrap();
        StepResult {
            grad: buf,
            loss,
            energy_abs,
            force_abs,
        }
    }
}

fn shard_gradient(
    model: &dyn EnergyModel,
    params: &ParamMap,
    data: &TaskData,
    indices: &[usize],
    normalizer: &Normalizer,
    scale: LossScale,
) -> Result<StepResult, TrainerError> {
    if indices.is_empty() {
        return Ok(StepResult::zeros(params.num_scalars()));
    }
    let tape = Tape::new();
    let tracked = params.track(&tape);
    let batch = data.batch(indices, normalizer)?;
    let terms = batch_loss(model, &tracked, &batch, &tape, scale)?;
    let wrt: Vec<&Tensor> = tracked.iter().map(|(_, t)| t).collect();
    let grads = grad(&terms.loss, &wrt, false)?;
    let mut flat = Vec::with_capacity(params.num_scalars());
    for g in &grads {
        flat.extend_from_slice(g.data());
    }
    Ok(StepResult {
        grad: flat,
        loss: terms.loss.item()?,
        energy_abs: terms.energy_abs_sum,
        force_abs: terms.force_abs_sum,
    })
}

/// How one optimizer step's gradient is computed and combined.
pub(crate) enum Exec {
    Single,
    Threaded(usize),
    Ring(Ring),
}

impl Exec {
    fn step(
        &mut self,
        model: &dyn EnergyModel,
        params: &ParamMap,
        data: &TaskData,
        indices: &[usize],
        normalizer: &Normalizer,
    ) -> Result<StepResult, TrainerError> {
        // every shard divides by the global batch totals, so shard losses add
        // up to the mean loss of the whole batch
        let scale = LossScale {
            energy: indices.len() as f64,
            force: if data.task.uses_forces() {
                indices
                    .iter()
                    .map(|&i| 3 * data.num_atoms(i))
                    .sum::<usize>() as f64
            } else {
                1.0
            },
        };
        match self {
            Exec::Single => shard_gradient(model, params, data, indices, normalizer, scale),
            Exec::Threaded(workers) => {
                let w = *workers;
                let shards = shard_ranges(indices.len(), w);
                let buffers = std::thread::scope(|s| {
                    let handles: Vec<_> = shards
                        .iter()
                        .map(|r| {
                            let idx = &indices[r.clone()];
                            s.spawn(move || {
                                shard_gradient(model, params, data, idx, normalizer, scale)
                                    .map(|r| r.pack(w as f64))
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| {
                            h.join().unwrap_or_else(|_| {
                                Err(TrainerError::Worker("worker thread panicked".into()))
                            })
                        })
                        .collect::<Result<Vec<_>, _>>()
                })?;
                Ok(StepResult::unpack(allreduce_mean_flat(&buffers)?))
            }
            Exec::Ring(ring) => {
                let w = ring.world();
                let r = shard_ranges(indices.len(), w)[ring.rank()].clone();
                let mut buf = shard_gradient(model, params, data, &indices[r], normalizer, scale)?
                    .pack(w as f64);
                ring.allreduce_mean(&mut buf)?;
                Ok(StepResult::unpack(buf))
            }
        }
    }

    /// Whether any rank asked to stop; `stop` is this rank's vote.
    fn agree_stop(&mut self, stop: bool) -> Result<bool, TrainerError> {
        match self {
            Exec::Ring(ring) if ring.world() > 1 => {
                let mut flag = [if stop { 1.0 } else { 0.0 }];
                ring.allreduce_mean(&mut flag)?;
                Ok(flag[0] > 0.0)
            }
            _ => Ok(stop),
        }
    }
}

/// The epoch loop shared by the coordinator and process-ddp workers.
pub(crate) struct Session<'a> {
    pub model: &'a dyn EnergyModel,
    pub config: &'a TrainerConfig,
    pub train: &'a TaskData,
    pub val: Option<&'a TaskData>,
    pub exec: Exec,
    pub callbacks: Vec<&'a mut dyn Callback>,
}

struct Live<'s> {
    epoch: usize,
    lr: f64,
    batch_loss: Option<f64>,
    train: Option<Metrics>,
    val: Option<Metrics>,
    epoch_time_s: Option<f64>,
    state: &'s TrainState,
}

fn live(state: &TrainState, epoch: usize, lr: f64) -> Live<'_> {
    Live {
        epoch,
        lr,
        batch_loss: None,
        train: None,
        val: None,
        epoch_time_s: None,
        state,
    }
}

impl Session<'_> {
    fn fire(&mut self, event: CallbackEvent, live: &Live) -> Result<Control, TrainerError> {
        let run = RunState {
            epoch: live.epoch,
            step: live.state.step,
            lr: live.lr,
            batch_loss: live.batch_loss,
            train: live.train,
            val: live.val,
            epoch_time_s: live.epoch_time_s,
            task: self.train.task,
            graph: self.train.settings,
            config: self.config,
            model: self.model,
            state: live.state,
        };
        let mut control = Control::Continue;
        for cb in self.callbacks.iter_mut() {
            let c = match event {
                CallbackEvent::FitStart => cb.on_fit_start(&run)?,
                CallbackEvent::TrainBatchEnd => cb.on_train_batch_end(&run)?,
                CallbackEvent::TrainEpochEnd => cb.on_train_epoch_end(&run)?,
                CallbackEvent::ValidationEpochEnd => cb.on_validation_epoch_end(&run)?,
                CallbackEvent::FitEnd => cb.on_fit_end(&run)?,
            };
            if c == Control::Stop {
                control = Control::Stop;
            }
        }
        Ok(control)
    }

    /// Runs epochs `state.epoch..max_epochs`; returns the per-epoch records
    /// and whether a callback stopped the run.
    pub fn run(
        &mut self,
        state: &mut TrainState,
    ) -> Result<(Vec<EpochRecord>, bool), TrainerError> {
        let cfg = self.config;
        let data = self.train;
        let n = data.len();
        let mut history = Vec::new();
        let mut stopped = false;
        let mut stop = self.fire(CallbackEvent::FitStart, &live(state, state.epoch, state.lr))?
            == Control::Stop;
        stop = self.exec.agree_stop(stop)?;
        if stop {
            return Ok((history, true));
        }
        for epoch in state.epoch..cfg.max_epochs {
            let started = Instant::now();
            let lr = state.lr;
            let order = epoch_order(n, cfg.seed, epoch);
            let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
            let mut window: Option<Vec<f64>> = None;
            let mut window_len = 0usize;
            let (mut e_abs, mut f_abs, mut comps) = (0.0, 0.0, 0usize);
            for (b, idx) in batches.iter().enumerate() {
                let r = self
                    .exec
                    .step(self.model, &state.params, data, idx, &state.normalizer)?;
                if !r.loss.is_finite() {
                    return Err(TrainerError::NonFinite {
                        loss: r.loss,
                        epoch,
                        batch: b,
                        step: state.step,
                    });
                }
                e_abs += r.energy_abs;
                f_abs += r.force_abs;
                if data.task.uses_forces() {
                    comps += idx.iter().map(|&i| 3 * data.num_atoms(i)).sum::<usize>();
                }
                match &mut window {
                    None => window = Some(r.grad),
                    Some(acc) => acc.iter_mut().zip(&r.grad).for_each(|(a, g)| *a += g),
                }
                window_len += 1;
                // the window is flushed at the end of every epoch
                if window_len == cfg.accumulate_grad_batches || b + 1 == batches.len() {
                    let mut g = window.take().unwrap();
                    if window_len > 1 {
                        let k = window_len as f64;
                        g.iter_mut().for_each(|v| *v /= k);
                    }
                    let mut flat = state.params.flatten();
                    state.adam.step(&mut flat, &g, lr);
                    state.params = state.params.with_values(&flat)?;
                    state.step += 1;
                    window_len = 0;
                }
                let mut l = live(state, epoch, lr);
                l.batch_loss = Some(r.loss);
                if self.fire(CallbackEvent::TrainBatchEnd, &l)? == Control::Stop {
                    stop = true;
                }
            }
            let epoch_time_s = started.elapsed().as_secs_f64();
            let std = state.normalizer.std;
            let train = Metrics {
                energy_mae_ev: e_abs * std / n as f64,
                force_mae_ev_per_ang: data
                    .task
                    .uses_forces()
                    .then(|| f_abs * std / comps.max(1) as f64),
            };
            state.epoch = epoch + 1;
            state.lr = lr * cfg.gamma;

            let mut l = live(state, epoch, lr);
            l.train = Some(train);
            l.epoch_time_s = Some(epoch_time_s);
            if self.fire(CallbackEvent::TrainEpochEnd, &l)? == Control::Stop {
                stop = true;
            }
            let val = match self.val {
                Some(v) => Some(evaluate(
                    self.model,
                    &state.params,
                    v,
                    &state.normalizer,
                    cfg.batch_size,
                )?),
                None => None,
            };
            l.val = val;
            if self.fire(CallbackEvent::ValidationEpochEnd, &l)? == Control::Stop {
                stop = true;
            }
            history.push(EpochRecord {
                epoch,
                step: state.step,
                lr,
                train,
                val,
                epoch_time_s,
            });
            if self.exec.agree_stop(stop)? {
                stopped = true;
                break;
            }
        }
        let last = history.last();
        let mut l = live(state, state.epoch.saturating_sub(1), state.lr);
        l.train = last.map(|r| r.train);
        l.val = last.and_then(|r| r.val);
        self.fire(CallbackEvent::FitEnd, &l)?;
        Ok((history, stopped))
    }
}

/// Runs training for one model according to a [`TrainerConfig`].
pub struct Trainer<'m> {
    model: &'m dyn EnergyModel,
    config: TrainerConfig,
    callbacks: Vec<Box<dyn Callback>>,
    launcher: Option<Box<dyn WorkerLauncher>>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m dyn EnergyModel, config: TrainerConfig) -> Result<Self, TrainerError> {
        config.validate()?;
        Ok(Trainer {
            model,
            config,
            callbacks: Vec::new(),
            launcher: None,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    /// Adds a callback; it runs after the ones implied by the config.
    pub fn with_callback(mut self, callback: impl Callback + 'static) -> Self {
        self.callbacks.push(Box::new(callback));
        self
    }

    /// How process-ddp starts its workers. Defaults to re-running the current
    /// executable with a `worker` argument.
    pub fn with_launcher(mut self, launcher: impl WorkerLauncher + 'static) -> Self {
        self.launcher = Some(Box::new(launcher));
        self
    }

    /// Freshly initialised parameters and a normalizer fitted on `train`.
    pub fn initial_state(&self, train: &TaskData) -> Result<TrainState, TrainerError> {
        let normalizer = Normalizer::fit(&train.energies)?;
        Ok(TrainState::fresh(
            self.model.init_params(self.config.seed),
            self.config.learning_rate,
            normalizer,
        ))
    }

    /// Trains on `train`, validating on `val` after every epoch. `resume`
    /// continues from a saved state instead of a fresh initialisation.
    pub fn fit(
        &mut self,
        train: &TaskData,
        val: Option<&TaskData>,
        resume: Option<TrainState>,
    ) -> Result<TaskRun, TrainerError> {
        if train.is_empty() {
            return Err(TrainerError::Config("training split is empty".into()));
        }
        if let Some(v) = val {
            if v.is_empty() {
                return Err(TrainerError::Config("validation split is empty".into()));
            }
            if v.task != train.task {
                return Err(TrainerError::Config(format!(
                    "validation split is prepared for {}, training split for {}",
                    v.task, train.task
                )));
            }
        }
        let mut state = match resume {
            Some(s) => s,
            None => self.initial_state(train)?,
        };
        self.model.check_params(&state.params)?;
        if state.adam.m.len() != state.params.num_scalars() {
            return Err(TrainerError::Checkpoint(
                "optimizer state does not match the parameters".into(),
            ));
        }

        let cfg = self.config.clone();
        let monitor = cfg
            .early_stop
            .as_ref()
            .map(|e| e.monitor.clone())
            .unwrap_or_else(|| "val_loss".into());
        let mut logger = cfg.log_path.clone().map(CsvLogger::new);
        let mut ckpt = cfg
            .checkpoint_dir
            .clone()
            .map(|d| ModelCheckpoint::new(d, monitor.clone()));
        let mut early = cfg
            .early_stop
            .as_ref()
            .map(|e| EarlyStopping::new(e.monitor.clone(), e.patience));
        let mut callbacks: Vec<&mut dyn Callback> = Vec::new();
        if let Some(l) = logger.as_mut() {
            callbacks.push(l);
        }
        if let Some(c) = ckpt.as_mut() {
            callbacks.push(c);
        }
        if let Some(e) = early.as_mut() {
            callbacks.push(e);
        }
        for cb in self.callbacks.iter_mut() {
            callbacks.push(cb.as_mut());
        }

        let mut cluster = None;
        let exec = match cfg.strategy {
            Strategy::Single => Exec::Single,
            Strategy::ThreadedDdp => Exec::Threaded(cfg.devices),
            Strategy::ProcessDdp if cfg.devices == 1 => Exec::Ring(Ring::solo()),
            Strategy::ProcessDdp => {
                let bootstrap = Checkpoint {
                    model_kind: self.model.kind().to_string(),
                    model_config: self.model.config_json(),
                    trainer_config: cfg.clone(),
                    task: train.task,
                    graph: train.settings,
                    state: state.clone(),
                };
                let default_launcher;
                let launcher: &dyn WorkerLauncher = match &self.launcher {
                    Some(l) => l.as_ref(),
                    None => {
                        default_launcher = CommandLauncher::current_exe_worker().map_err(|e| {
                            TrainerError::Worker(format!("cannot locate executable: {e}"))
                        })?;
                        &default_launcher
                    }
                };
                let (c, ring) =
                    Cluster::start(cfg.devices, launcher, &bootstrap, &train.structures)?;
                cluster = Some(c);
                Exec::Ring(ring)
            }
        };
        let mut session = Session {
            model: self.model,
            config: &cfg,
            train,
            val,
            exec,
            callbacks,
        };
        let outcome = session.run(&mut state);
        drop(session);
        let (history, stopped_early) = match (outcome, cluster) {
            (Ok(r), Some(c)) => {
                c.finish()?;
                r
            }
            (Ok(r), None) => r,
            (Err(e), Some(c)) => return Err(c.abort(e)),
            (Err(e), None) => return Err(e),
        };
        let mut checkpoints = ckpt.as_ref().map(|c| c.outputs()).unwrap_or_default();
        checkpoints.sort();
        Ok(TaskRun {
            state,
            history,
            stopped_early,
            checkpoints,
            log_path: logger.as_ref().map(|l| l.path().to_path_buf()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    pub devices: usize,
    pub epoch_time_s: f64,
    pub speedup: f64,
}

/// Mean training-epoch time of the same threaded-ddp workload for each
/// worker count, with speedups relative to the first entry.
pub fn scaling_benchmark(
    model: &dyn EnergyModel,
    data: &TaskData,
    devices_list: &[usize],
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<ScalingRow>, TrainerError> {
    if devices_list.is_empty() || devices_list.contains(&0) {
        return Err(TrainerError::Config(
            "devices list must hold positive worker counts".into(),
        ));
    }
    if epochs == 0 {
        return Err(TrainerError::Config("need at least one epoch".into()));
    }
    let mut rows: Vec<ScalingRow> = Vec::new();
    for &devices in devices_list {
        let config = TrainerConfig {
            max_epochs: epochs,
            batch_size,
            devices,
            strategy: Strategy::ThreadedDdp,
            seed,
            ..TrainerConfig::default()
        };
        let run = Trainer::new(model, config)?.fit(data, None, None)?;
        let total: f64 = run.history.iter().map(|r| r.epoch_time_s).sum();
        let epoch_time_s = total / run.history.len() as f64;
        let base = rows.first().map_or(epoch_time_s, |r| r.epoch_time_s);
        rows.push(ScalingRow {
            devices,
            epoch_time_s,
            speedup: base / epoch_time_s,
        });
    }
    Ok(rows)
}
