//! `surfml`: devsets, training, evaluation, inspection and the scaling
//! benchmark from the command line. Diagnostics go to stderr; stdout only
//! carries CSV.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use surfml::models::{Egnn, EgnnConfig, EnergyModel};
use surfml::structures::{
    file_checksum, generate_synthetic, load_dataset, make_devset, save_dataset, AtomicStructure,
    DatasetManifest,
};
use surfml::tasks::{evaluate, GraphSettings, TaskData, TaskKind};
use surfml::trainer::process::{load_model, run_worker};
use surfml::trainer::{
    load_checkpoint, scaling_benchmark, Callback, Control, EarlyStopConfig, RunState, Strategy,
    TrainerConfig, TrainerError, CSV_HEADER,
};

/// An error caused by the user's input; exits with status 2.
#[derive(Debug)]
struct InvalidInput(String);

impl fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidInput {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    InvalidInput(msg.into()).into()
}

#[derive(Parser)]
#[command(
    name = "surfml",
    version,
    about = "Catalyst energy models at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded devset (JSON Lines) and its manifest.
    Devset(DevsetArgs),
    /// Train a model; writes metrics.csv, checkpoints/ and resolved-config.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and print one CSV row.
    Eval(EvalArgs),
    /// Summarise a dataset or checkpoint as CSV.
    Inspect(InspectArgs),
    /// Time training epochs for several threaded worker counts.
    BenchScaling(BenchArgs),
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Args)]
struct DevsetArgs {
    /// Source dataset to sample from.
    #[arg(
        long,
        conflicts_with = "synthetic",
        required_unless_present = "synthetic"
    )]
    input: Option<PathBuf>,
    /// Sample from N freshly generated synthetic records instead.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 6)]
    atoms_min: usize,
    #[arg(long, default_value_t = 20)]
    atoms_max: usize,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation data; defaults to the training file.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    accumulate_grad_batches: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
    #[arg(long)]
    early_stop_monitor: Option<String>,
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long)]
    max_neighbors: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Must match the checkpoint's task when given.
    #[arg(long)]
    task: Option<String>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(
        long,
        conflicts_with = "checkpoint",
        required_unless_present = "checkpoint"
    )]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated worker counts, e.g. 1,2,4.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    devices_list: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    /// Dataset to train on; defaults to a fixed synthetic workload.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    records: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    connect: SocketAddr,
}

/// Everything `train` reads, with every default filled in.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    task: TaskKind,
    train: Option<PathBuf>,
    val: Option<PathBuf>,
    run_dir: PathBuf,
    max_epochs: usize,
    batch_size: usize,
    devices: usize,
    strategy: Strategy,
    accumulate_grad_batches: usize,
    learning_rate: f64,
    gamma: f64,
    seed: u64,
    checkpoint_dir: Option<PathBuf>,
    log_path: Option<PathBuf>,
    early_stop_monitor: String,
    early_stop_patience: Option<usize>,
    comm_timeout_s: f64,
    cutoff: f64,
    max_neighbors: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainerConfig::default();
        let g = GraphSettings::default();
        RunConfig {
            task: TaskKind::IS2RE,
            train: None,
            val: None,
            run_dir: PathBuf::from("run"),
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            devices: t.devices,
            strategy: t.strategy,
            accumulate_grad_batches: t.accumulate_grad_batches,
            learning_rate: t.learning_rate,
            gamma: t.gamma,
            seed: t.seed,
            checkpoint_dir: None,
            log_path: None,
            early_stop_monitor: "val_loss".into(),
            early_stop_patience: None,
            comm_timeout_s: t.comm_timeout_s,
            cutoff: g.cutoff,
            max_neighbors: g.max_neighbors,
        }
    }
}

impl RunConfig {
    fn keys() -> Vec<String> {
        match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(map)) => map.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        }
    }

    fn from_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let doc: Value =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let Value::Object(given) = doc else {
            return Err(invalid(format!(
                "{}: expected a JSON object",
                path.display()
            )));
        };
        let valid = Self::keys();
        if let Some(bad) = given.keys().find(|k| !valid.contains(k)) {
            return Err(invalid(format!(
                "unknown config key '{bad}'; valid keys: {}",
                valid.join(", ")
            )));
        }
        let mut merged = match serde_json::to_value(RunConfig::default())? {
            Value::Object(m) => m,
            _ => unreachable!(),
        };
        merged.extend(given);
        serde_json::from_value(Value::Object(merged))
            .map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    fn apply(&mut self, a: &TrainArgs) -> Result<()> {
        if let Some(t) = &a.task {
            self.task = t.parse().map_err(|e| invalid(format!("{e}")))?;
        }
        if let Some(s) = &a.strategy {
            self.strategy = s.parse().map_err(|e| invalid(format!("{e}")))?;
        }
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = &a.$field {
                    self.$field = v.clone().into();
                }
            )*};
        }
        take!(train, val);
        take!(
            run_dir,
            devices,
            max_epochs,
            batch_size,
            accumulate_grad_batches,
            learning_rate,
            gamma,
            seed,
            early_stop_monitor,
            cutoff,
            max_neighbors
        );
        if a.early_stop_patience.is_some() {
            self.early_stop_patience = a.early_stop_patience;
        }
        Ok(())
    }

    /// Fills run-directory defaults for outputs that were not set.
    fn resolve(&mut self) {
        if self.checkpoint_dir.is_none() {
            self.checkpoint_dir = Some(self.run_dir.join("checkpoints"));
        }
        if self.log_path.is_none() {
            self.log_path = Some(self.run_dir.join("metrics.csv"));
        }
        if self.val.is_none() {
            self.val = self.train.clone();
        }
    }

    fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            devices: self.devices,
            strategy: self.strategy,
            accumulate_grad_batches: self.accumulate_grad_batches,
            learning_rate: self.learning_rate,
            gamma: self.gamma,
            seed: self.seed,
            checkpoint_dir: self.checkpoint_dir.clone(),
            log_path: self.log_path.clone(),
            early_stop: self.early_stop_patience.map(|patience| EarlyStopConfig {
                monitor: self.early_stop_monitor.clone(),
                patience,
            }),
            comm_timeout_s: self.comm_timeout_s,
        }
    }

    fn graph(&self) -> GraphSettings {
        GraphSettings {
            cutoff: self.cutoff,
            max_neighbors: self.max_neighbors,
        }
    }
}

fn load_records(path: &Path) -> Result<Vec<AtomicStructure>> {
    let records = load_dataset(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if records.is_empty() {
        return Err(invalid(format!("{}: dataset is empty", path.display())));
    }
    Ok(records)
}

fn task_data(path: &Path, task: TaskKind, graph: GraphSettings) -> Result<TaskData> {
    TaskData::new(load_records(path)?, task, graph)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Classifies trainer errors: bad configs and checkpoints are the user's.
fn trainer_error(e: TrainerError) -> anyhow::Error {
    match e {
        TrainerError::Config(_) | TrainerError::Checkpoint(_) => invalid(e.to_string()),
        other => anyhow::Error::new(other),
    }
}

fn manifest_path(output: &Path) -> PathBuf {
    output.with_extension("manifest.json")
}

fn cmd_devset(a: DevsetArgs) -> Result<()> {
    let pool = match (&a.input, a.synthetic) {
        (Some(path), _) => load_records(path)?,
        (None, Some(count)) => {
            if a.atoms_min < 2 || a.atoms_min > a.atoms_max {
                return Err(invalid(format!(
                    "need 2 <= atoms-min <= atoms-max, got {} and {}",
                    a.atoms_min, a.atoms_max
                )));
            }
            generate_synthetic(count, a.atoms_min, a.atoms_max, a.seed)
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    let (devset, manifest) = make_devset(&pool, a.n, a.seed).map_err(|e| invalid(e.to_string()))?;
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_dataset(&a.output, &devset)?;
    let manifest = DatasetManifest {
        path: a.output.clone(),
        checksum: file_checksum(&a.output)?,
        ..manifest
    };
    let mpath = manifest_path(&a.output);
    manifest.save(&mpath)?;
    log::info!(
        "wrote {} records to {} (manifest {})",
        devset.len(),
        a.output.display(),
        mpath.display()
    );
    Ok(())
}

/// Reports each epoch on stderr.
struct Progress;

impl Callback for Progress {
    fn on_validation_epoch_end(&mut self, run: &RunState) -> Result<Control, TrainerError> {
        let fmt_m = |m: Option<surfml::tasks::Metrics>| match m {
            Some(m) => match m.force_mae_ev_per_ang {
                Some(f) => format!("E {:.4} eV, F {:.4} eV/Å", m.energy_mae_ev, f),
                None => format!("E {:.4} eV", m.energy_mae_ev),
            },
            None => "-".into(),
        };
        log::info!(
            "epoch {} step {} lr {:.3e}: train {} | val {} ({:.2}s)",
            run.epoch,
            run.step,
            run.lr,
            fmt_m(run.train),
            fmt_m(run.val),
            run.epoch_time_s.unwrap_or(0.0)
        );
        Ok(Control::Continue)
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&a)?;
    cfg.resolve();
    let train_path = cfg
        .train
        .clone()
        .ok_or_else(|| invalid("no training data: pass --train or set 'train' in the config"))?;
    let val_path = cfg.val.clone().expect("resolved");
    let trainer_config = cfg.trainer_config();
    trainer_config.validate().map_err(trainer_error)?;

    fs::create_dir_all(&cfg.run_dir)
        .with_context(|| format!("creating {}", cfg.run_dir.display()))?;
    let resolved = cfg.run_dir.join("resolved-config.json");
    fs::write(&resolved, serde_json::to_string_pretty(&cfg)? + "\n")
        .with_context(|| format!("writing {}", resolved.display()))?;

    let train = task_data(&train_path, cfg.task, cfg.graph())?;
    let val = task_data(&val_path, cfg.task, cfg.graph())?;

    let (model, resume): (Box<dyn EnergyModel>, _) = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(trainer_error)?;
            if ckpt.task != cfg.task {
                return Err(invalid(format!(
                    "checkpoint was trained for {}, config asks for {}",
                    ckpt.task, cfg.task
                )));
            }
            (load_model(&ckpt).map_err(trainer_error)?, Some(ckpt.state))
        }
        None => (Box::new(Egnn::new(EgnnConfig::default())?), None),
    };
    log::info!(
        "training {} ({} parameters) on {} records, validating on {}",
        model.kind(),
        model
            .param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum::<usize>(),
        train.len(),
        val.len()
    );
    let run = surfml::trainer::Trainer::new(model.as_ref(), trainer_config)
        .map_err(trainer_error)?
        .with_callback(Progress)
        .fit(&train, Some(&val), resume)
        .map_err(trainer_error)?;
    if let Some(m) = run.final_val() {
        log::info!("final validation energy MAE {:.6} eV", m.energy_mae_ev);
    }
    for p in &run.checkpoints {
        log::info!("checkpoint {}", p.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint).map_err(trainer_error)?;
    if let Some(t) = &a.task {
        let t: TaskKind = t.parse().map_err(|e| invalid(format!("{e}")))?;
        if t != ckpt.task {
            return Err(invalid(format!(
                "checkpoint was trained for {}, not {t}",
                ckpt.task
            )));
        }
    }
    let model = load_model(&ckpt).map_err(trainer_error)?;
    let data = task_data(&a.data, ckpt.task, ckpt.graph)?;
    let m = evaluate(
        model.as_ref(),
        &ckpt.state.params,
        &data,
        &ckpt.state.normalizer,
        a.batch_size,
    )?;
    println!("{CSV_HEADER}");
    println!(
        "{},{},eval,{:?},{},,",
        ckpt.state.epoch.saturating_sub(1),
        ckpt.state.step,
        m.energy_mae_ev,
        m.force_mae_ev_per_ang
            .map(|v| format!("{v:?}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    if let Some(path) = &a.data {
        let records = load_records(path)?;
        let atoms: Vec<usize> = records.iter().map(|r| r.num_atoms()).collect();
        let energies: Vec<f64> = records.iter().filter_map(|r| r.energy).collect();
        let n = energies.len().max(1) as f64;
        let mean = energies.iter().sum::<f64>() / n;
        let std = (energies.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut tags = BTreeMap::new();
        for r in &records {
            for &t in &r.tags {
                *tags.entry(t).or_insert(0usize) += 1;
            }
        }
        println!("records,atoms_min,atoms_max,atoms_mean,labelled,with_forces,energy_mean_ev,energy_std_ev,tag0,tag1,tag2,sha256");
        println!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            records.len(),
            atoms.iter().min().unwrap(),
            atoms.iter().max().unwrap(),
            atoms.iter().sum::<usize>() as f64 / atoms.len() as f64,
            energies.len(),
            records.iter().filter(|r| r.forces.is_some()).count(),
            mean,
            std,
            tags.get(&0).unwrap_or(&0),
            tags.get(&1).unwrap_or(&0),
            tags.get(&2).unwrap_or(&0),
            file_checksum(path)?
        );
    } else if let Some(path) = &a.checkpoint {
        let ckpt = load_checkpoint(path).map_err(trainer_error)?;
        println!("tensor,shape,numel");
        for (name, t) in ckpt.state.params.iter() {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            println!("{name},{},{}", shape.join("x"), t.numel());
        }
        log::info!(
            "{} model for {}, epoch {}, step {}, {} parameters",
            ckpt.model_kind,
            ckpt.task,
            ckpt.state.epoch,
            ckpt.state.step,
            ckpt.state.params.num_scalars()
        );
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    if a.devices_list.is_empty() || a.devices_list.contains(&0) {
        return Err(invalid("devices list must hold positive integers"));
    }
    let records = match &a.data {
        Some(path) => load_records(path)?,
        None => generate_synthetic(a.records, 12, 20, 7),
    };
    let data = TaskData::new(records, TaskKind::IS2RE, GraphSettings::default())?;
    let model = Egnn::new(EgnnConfig::default())?;
    let rows = scaling_benchmark(&model, &data, &a.devices_list, a.epochs, a.batch_size, 0)
        .map_err(trainer_error)?;
    let mut out = String::from("devices,epoch_time_s,speedup\n");
    for r in &rows {
        out.push_str(&format!("{},{},{}\n", r.devices, r.epoch_time_s, r.speedup));
    }
    if let Some(path) = &a.output {
        fs::write(path, &out).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{out}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Devset(a) => cmd_devset(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::BenchScaling(a) => cmd_bench(a),
        Command::Worker(a) => run_worker(a.connect).map_err(anyhow::Error::new),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InvalidInput>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
