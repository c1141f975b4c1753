mod common;

use std::time::Duration;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfml::tasks::TaskKind;
use surfml::trainer::comm::ring_allreduce_loopback;
use surfml::trainer::process::ThreadLauncher;
use surfml::trainer::{
    early_stopping, load_checkpoint, save_checkpoint, Callback, CallbackEvent, Checkpoint, Control,
    EarlyStopConfig, RunState, Strategy, Trainer, TrainerConfig, TrainerError, CSV_HEADER,
};

fn config(epochs: usize, batch: usize) -> TrainerConfig {
    TrainerConfig {
        max_epochs: epochs,
        batch_size: batch,
        seed: 3,
        ..TrainerConfig::default()
    }
}

fn ddp(mut c: TrainerConfig, strategy: Strategy, devices: usize) -> TrainerConfig {
    c.strategy = strategy;
    c.devices = devices;
    c
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let model = tiny_model(1);
    let data = synthetic_data(6, (4, 8), 1, TaskKind::IS2RE);
    let rec = Recorder::default();
    let mut trainer = Trainer::new(&model, config(0, 4))
        .unwrap()
        .with_callback(rec.clone());
    let initial = trainer.initial_state(&data).unwrap();
    let run = trainer.fit(&data, Some(&data), None).unwrap();
    assert!(run.history.is_empty());
    assert!(run.state.params.bit_eq(&initial.params));
    assert_eq!(run.state.step, 0);
    let kinds: Vec<_> = rec.events().into_iter().map(|e| e.0).collect();
    assert_eq!(kinds, vec![CallbackEvent::FitStart, CallbackEvent::FitEnd]);
}

#[test]
fn ten_samples_are_overfit() {
    let model = reference_model();
    let data = synthetic_data(10, (6, 20), 1, TaskKind::IS2RE);
    let cfg = TrainerConfig {
        gamma: 1.0,
        ..config(200, 8)
    };
    let run = Trainer::new(&model, cfg)
        .unwrap()
        .fit(&data, None, None)
        .unwrap();
    let first = run.history[0].train.energy_mae_ev;
    let last = run.final_train().unwrap().energy_mae_ev;
    assert!(last < 0.2 * first, "train MAE {first} -> {last}");
}

#[test]
fn accumulation_matches_a_larger_batch() {
    let model = tiny_model(2);
    let data = synthetic_data(16, (4, 9), 2, TaskKind::IS2RE);
    let big = Trainer::new(&model, config(3, 8))
        .unwrap()
        .fit(&data, None, None)
        .unwrap();
    let cfg = TrainerConfig {
        accumulate_grad_batches: 2,
        ..config(3, 4)
    };
    let acc = Trainer::new(&model, cfg)
        .unwrap()
        .fit(&data, None, None)
        .unwrap();
    assert_eq!(big.state.step, acc.state.step);
    let gap = max_abs_diff(&big.state.params.flatten(), &acc.state.params.flatten());
    assert!(gap < 1e-8, "gap {gap:e}");
}

#[test]
fn partial_accumulation_windows_flush_at_epoch_end() {
    let model = tiny_model(1);
    let data = synthetic_data(10, (4, 6), 2, TaskKind::IS2RE);
    let cfg = TrainerConfig {
        accumulate_grad_batches: 4,
        ..config(2, 2)
    };
    let run = Trainer::new(&model, cfg)
        .unwrap()
        .fit(&data, None, None)
        .unwrap();
    // 5 micro-batches per epoch: one full window of 4 and one of 1
    assert_eq!(run.state.step, 4);
}

#[test]
fn threaded_ddp_reproduces_single_worker_steps() {
    let model = tiny_model(2);
    for task in [TaskKind::IS2RE, TaskKind::S2EF] {
        let data = synthetic_data(13, (4, 10), 4, task);
        let base = config(2, 5);
        let single = step_trajectory(&model, &data, base.clone());
        for w in [2, 4] {
            let t = step_trajectory(&model, &data, ddp(base.clone(), Strategy::ThreadedDdp, w));
            let gap = trajectory_gap(&single, &t);
            assert!(gap < 1e-8, "{task} with {w} workers: gap {gap:e}");
        }
    }
}

#[test]
fn process_ddp_reproduces_single_worker_steps() {
    let model = tiny_model(1);
    for task in [TaskKind::IS2RE, TaskKind::S2EF] {
        let data = synthetic_data(9, (4, 8), 6, task);
        let base = config(2, 4);
        let single = step_trajectory(&model, &data, base.clone());
        for w in [2, 3] {
            let t = step_trajectory(&model, &data, ddp(base.clone(), Strategy::ProcessDdp, w));
            let gap = trajectory_gap(&single, &t);
            assert!(gap < 1e-8, "{task} with {w} ranks: gap {gap:e}");
        }
    }
}

#[test]
fn process_ddp_final_metrics_match_single() {
    let model = tiny_model(1);
    let data = synthetic_data(8, (4, 8), 6, TaskKind::IS2RE);
    let single = Trainer::new(&model, config(3, 4))
        .unwrap()
        .fit(&data, Some(&data), None)
        .unwrap();
    let multi = Trainer::new(&model, ddp(config(3, 4), Strategy::ProcessDdp, 2))
        .unwrap()
        .with_launcher(ThreadLauncher)
        .fit(&data, Some(&data), None)
        .unwrap();
    let (a, b) = (single.final_val().unwrap(), multi.final_val().unwrap());
    assert!((a.energy_mae_ev - b.energy_mae_ev).abs() < 1e-10);
}

struct FailingLauncher;

impl surfml::trainer::process::WorkerLauncher for FailingLauncher {
    fn launch(
        &self,
        _: std::net::SocketAddr,
    ) -> std::io::Result<surfml::trainer::process::WorkerHandle> {
        Err(std::io::Error::other("no workers today"))
    }
}

#[test]
fn worker_launch_failures_are_reported() {
    let model = tiny_model(1);
    let data = synthetic_data(4, (4, 6), 6, TaskKind::IS2RE);
    let err = Trainer::new(&model, ddp(config(1, 4), Strategy::ProcessDdp, 2))
        .unwrap()
        .with_launcher(FailingLauncher)
        .fit(&data, None, None)
        .unwrap_err();
    assert!(matches!(err, TrainerError::Worker(_)), "{err}");
    assert!(err.to_string().contains("no workers today"), "{err}");
}

#[test]
fn ring_allreduce_matches_the_arithmetic_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for world in [2, 3, 4] {
        for len in [0, 1, world - 1, world, 7, 1000] {
            let buffers: Vec<Vec<f64>> = (0..world)
                .map(|_| (0..len).map(|_| rng.gen_range(-10.0..10.0)).collect())
                .collect();
            let oracle: Vec<f64> = (0..len)
                .map(|i| buffers.iter().map(|b| b[i]).sum::<f64>() / world as f64)
                .collect();
            let out = ring_allreduce_loopback(&buffers, Duration::from_secs(10)).unwrap();
            for r in &out {
                assert!(max_abs_diff(r, &oracle) <= 1e-12, "world {world} len {len}");
            }
            for r in &out[1..] {
                assert_eq!(r, &out[0], "ranks disagree");
            }
        }
    }
}

/// Epochs since the last strict improvement of the running best.
fn stale_epochs(history: &[f64]) -> usize {
    let mut best_at = 0;
    for t in 1..history.len() {
        if history[t] < history[best_at] {
            best_at = t;
        }
    }
    history.len() - 1 - best_at
}

/// First epoch after which a scan over `history` stops.
fn reference_stop_epoch(history: &[f64], patience: usize) -> Option<usize> {
    (1..=history.len())
        .find(|&t| stale_epochs(&history[..t]) > patience)
        .map(|t| t - 1)
}

proptest! {
    #[test]
    fn early_stopping_matches_reference_scan(
        history in prop::collection::vec(0u8..6, 1..30),
        patience in 0usize..5,
    ) {
        let h: Vec<f64> = history.iter().map(|&v| v as f64).collect();
        for t in 1..=h.len() {
            prop_assert_eq!(early_stopping(&h[..t], patience), stale_epochs(&h[..t]) > patience);
        }
    }
}

#[test]
fn early_stopping_ends_runs_where_the_scan_says() {
    let model = tiny_model(1);
    let data = synthetic_data(8, (4, 7), 3, TaskKind::IS2RE);
    for patience in [0, 1, 2] {
        let cfg = TrainerConfig {
            learning_rate: 0.05,
            gamma: 1.0,
            early_stop: Some(EarlyStopConfig {
                monitor: "val_loss".into(),
                patience,
            }),
            ..config(40, 4)
        };
        let run = Trainer::new(&model, cfg)
            .unwrap()
            .fit(&data, Some(&data), None)
            .unwrap();
        let vals: Vec<f64> = run.history.iter().map(|r| r.val.unwrap().loss()).collect();
        match reference_stop_epoch(&vals, patience) {
            Some(t) => {
                assert!(run.stopped_early);
                assert_eq!(t + 1, run.history.len());
            }
            None => {
                assert!(!run.stopped_early);
                assert_eq!(run.history.len(), 40);
            }
        }
    }
}

struct StopAfter(usize);

impl Callback for StopAfter {
    fn on_train_epoch_end(&mut self, run: &RunState) -> Result<Control, TrainerError> {
        Ok(if run.epoch + 1 >= self.0 {
            Control::Stop
        } else {
            Control::Continue
        })
    }
}

#[test]
fn callbacks_can_stop_training() {
    let model = tiny_model(1);
    let data = synthetic_data(4, (4, 6), 3, TaskKind::IS2RE);
    let run = Trainer::new(&model, config(10, 2))
        .unwrap()
        .with_callback(StopAfter(3))
        .fit(&data, None, None)
        .unwrap();
    assert!(run.stopped_early);
    assert_eq!(run.history.len(), 3);
    assert_eq!(run.state.epoch, 3);
}

#[test]
fn callback_events_follow_the_loop() {
    let model = tiny_model(1);
    let data = synthetic_data(5, (4, 6), 3, TaskKind::IS2RE);
    let rec = Recorder::default();
    Trainer::new(&model, config(2, 2))
        .unwrap()
        .with_callback(rec.clone())
        .fit(&data, Some(&data), None)
        .unwrap();
    use CallbackEvent::*;
    let mut expected = vec![(FitStart, 0, 0)];
    let mut step = 0;
    for epoch in 0..2 {
        for _ in 0..3 {
            step += 1;
            expected.push((TrainBatchEnd, epoch, step));
        }
        expected.push((TrainEpochEnd, epoch, step));
        expected.push((ValidationEpochEnd, epoch, step));
    }
    expected.push((FitEnd, 1, step));
    assert_eq!(rec.events(), expected);
}

#[test]
fn learning_rate_decays_by_gamma_each_epoch() {
    let model = tiny_model(1);
    let data = synthetic_data(4, (4, 6), 3, TaskKind::IS2RE);
    let cfg = config(7, 4);
    let run = Trainer::new(&model, cfg.clone())
        .unwrap()
        .fit(&data, None, None)
        .unwrap();
    let mut lr = cfg.learning_rate;
    for (e, r) in run.history.iter().enumerate() {
        assert_eq!(r.lr, lr, "epoch {e}");
        let closed = cfg.learning_rate * cfg.gamma.powi(e as i32);
        assert!((r.lr - closed).abs() <= 1e-15 * closed);
        lr *= cfg.gamma;
    }
    assert_eq!(run.state.lr, lr);
}

#[test]
fn non_finite_losses_abort_with_the_step() {
    let model = tiny_model(1);
    let data = synthetic_data(6, (4, 6), 3, TaskKind::IS2RE);
    let mut trainer = Trainer::new(&model, config(3, 2)).unwrap();
    let mut state = trainer.initial_state(&data).unwrap();
    let mut flat = state.params.flatten();
    flat[0] = f64::NAN;
    state.params = state.params.with_values(&flat).unwrap();
    state.step = 17;
    let err = trainer.fit(&data, None, Some(state)).unwrap_err();
    assert!(err.to_string().contains("step 17"), "{err}");
    match err {
        TrainerError::NonFinite {
            epoch, batch, step, ..
        } => {
            assert_eq!((epoch, batch, step), (0, 0, 17));
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn checkpoints_round_trip_bit_identically() {
    let model = tiny_model(2);
    let data = synthetic_data(6, (4, 8), 3, TaskKind::S2EF);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainerConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..config(2, 4)
    };
    let run = Trainer::new(&model, cfg)
        .unwrap()
        .fit(&data, Some(&data), None)
        .unwrap();
    let path = dir.path().join("last.ckpt");
    assert!(run.checkpoints.contains(&path));
    let ckpt = load_checkpoint(&path).unwrap();
    assert!(ckpt.state.params.bit_eq(&run.state.params));
    assert_eq!(ckpt.state.adam, run.state.adam);
    assert_eq!(ckpt.state.epoch, 2);
    assert_eq!(ckpt.state.step, run.state.step);
    assert_eq!(ckpt.state.lr, run.state.lr);
    assert_eq!(ckpt.state.normalizer, run.state.normalizer);

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(ckpt.to_bytes(), bytes);
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&ckpt, &again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    assert!(dir.path().join("best.ckpt").exists());
}

#[test]
fn resuming_at_epoch_five_matches_an_uninterrupted_run() {
    let model = tiny_model(2);
    for task in [TaskKind::IS2RE, TaskKind::S2EF] {
        let data = synthetic_data(9, (4, 8), 5, task);
        let full = Trainer::new(&model, config(10, 4))
            .unwrap()
            .fit(&data, Some(&data), None)
            .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let first = TrainerConfig {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            log_path: Some(dir.path().join("metrics.csv")),
            ..config(5, 4)
        };
        Trainer::new(&model, first.clone())
            .unwrap()
            .fit(&data, Some(&data), None)
            .unwrap();
        let ckpt = load_checkpoint(dir.path().join("last.ckpt")).unwrap();
        assert_eq!(ckpt.state.epoch, 5);
        let second = TrainerConfig {
            max_epochs: 10,
            ..first
        };
        let resumed = Trainer::new(&model, second)
            .unwrap()
            .fit(&data, Some(&data), Some(ckpt.state))
            .unwrap();
        let gap = max_abs_diff(
            &full.state.params.flatten(),
            &resumed.state.params.flatten(),
        );
        assert!(gap <= 1e-10, "{task}: gap {gap:e}");
        assert_eq!(full.state.step, resumed.state.step);
        assert_eq!(full.state.lr, resumed.state.lr);
        for (a, b) in full.history[5..].iter().zip(&resumed.history) {
            assert_eq!(
                (a.epoch, a.step, a.lr, a.train, a.val),
                (b.epoch, b.step, b.lr, b.train, b.val)
            );
        }

        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(text.lines().count(), 11);
        let epochs: Vec<&str> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(epochs, (0..10).map(|e| e.to_string()).collect::<Vec<_>>());
    }
}

#[test]
fn metrics_files_have_one_row_per_epoch() {
    let model = tiny_model(1);
    let data = synthetic_data(5, (4, 7), 3, TaskKind::S2EF);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainerConfig {
        log_path: Some(dir.path().join("m.csv")),
        ..config(4, 2)
    };
    let run = Trainer::new(&model, cfg)
        .unwrap()
        .fit(&data, Some(&data), None)
        .unwrap();
    for (name, split) in [("m.csv", "val"), ("train_m.csv", "train")] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5, "{name}");
        assert_eq!(lines[0], CSV_HEADER);
        for (e, line) in lines[1..].iter().enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 7);
            assert_eq!(cols[0], e.to_string());
            assert_eq!(cols[2], split);
            let rec = &run.history[e];
            let m = if split == "val" {
                rec.val.unwrap()
            } else {
                rec.train
            };
            assert_eq!(cols[3].parse::<f64>().unwrap(), m.energy_mae_ev);
            assert_eq!(
                cols[4].parse::<f64>().unwrap(),
                m.force_mae_ev_per_ang.unwrap()
            );
            assert_eq!(cols[5].parse::<f64>().unwrap(), rec.lr);
        }
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let model = tiny_model(1);
    for cfg in [
        TrainerConfig {
            batch_size: 0,
            ..config(1, 1)
        },
        TrainerConfig {
            devices: 0,
            ..config(1, 1)
        },
        TrainerConfig {
            devices: 2,
            ..config(1, 1)
        },
        TrainerConfig {
            learning_rate: -1.0,
            ..config(1, 1)
        },
        TrainerConfig {
            accumulate_grad_batches: 0,
            ..config(1, 1)
        },
    ] {
        assert!(matches!(
            Trainer::new(&model, cfg),
            Err(TrainerError::Config(_))
        ));
    }
}
