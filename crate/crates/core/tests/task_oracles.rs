mod common;

use common::*;
use proptest::prelude::*;
use surfml::models::EnergyModel;
use surfml::tasks::{batch_loss, evaluate, is2re_loss, s2ef_loss, LossScale, Normalizer, TaskKind};
use surfml::tensor::{Tape, Tensor};

fn mae(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

proptest! {
    #[test]
    fn losses_match_reference_sums(
        e in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..20),
        f in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 1..20),
    ) {
        let (pe, te): (Vec<f64>, Vec<f64>) = e.iter().copied().unzip();
        let n = f.len() / 3 * 3;
        prop_assume!(n > 0);
        let (pf, tf): (Vec<f64>, Vec<f64>) = f[..n].iter().copied().unzip();
        let is2re = is2re_loss(&Tensor::vector(pe.clone()), &Tensor::vector(te.clone())).unwrap();
        prop_assert!((is2re.item().unwrap() - mae(&pe, &te)).abs() < 1e-12);

        let pf_t = Tensor::new([n / 3, 3], pf.clone()).unwrap();
        let tf_t = Tensor::new([n / 3, 3], tf.clone()).unwrap();
        let joint = s2ef_loss(&Tensor::vector(pe.clone()), &Tensor::vector(te.clone()), &pf_t, &tf_t).unwrap();
        let expected = mae(&pe, &te) + mae(&pf, &tf);
        prop_assert!((joint.item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn normalization_round_trips(values in prop::collection::vec(-50.0..50.0f64, 2..30)) {
        let norm = Normalizer::fit(&values).unwrap();
        prop_assert!(norm.std > 0.0);
        let z: Vec<f64> = values.iter().map(|&v| norm.normalize(v)).collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
        for (&v, &zv) in values.iter().zip(&z) {
            prop_assert!((norm.denormalize(zv) - v).abs() < 1e-9);
            prop_assert!((norm.denormalize_force(norm.normalize_force(v)) - v).abs() < 1e-9);
        }
    }
}

#[test]
fn loss_is_zero_only_for_exact_predictions() {
    let t = Tensor::vector([1.0, -2.0, 0.5]);
    assert_eq!(is2re_loss(&t, &t).unwrap().item().unwrap(), 0.0);
    assert!(is2re_loss(&t, &Tensor::vector([1.0, -2.0])).is_err());
    assert!(is2re_loss(
        &Tensor::vector(Vec::<f64>::new()),
        &Tensor::vector(Vec::<f64>::new())
    )
    .is_err());
}

#[test]
fn evaluation_matches_a_per_record_loop() {
    let model = tiny_model(2);
    let params = perturbed_params(&model, 4, 0.3);
    for task in [TaskKind::IS2RE, TaskKind::S2EF] {
        let data = synthetic_data(7, (4, 9), 12, task);
        let norm = Normalizer::fit(&data.energies).unwrap();
        let m = evaluate(&model, &params, &data, &norm, 3).unwrap();

        let (mut e_sum, mut f_sum, mut comps) = (0.0, 0.0, 0);
        for i in 0..data.len() {
            let (e, f) = energy_forces(&model, &params, &data.graphs[i]);
            e_sum += (norm.denormalize(e) - data.energies[i]).abs();
            let labels = data.structures[i].forces.as_ref().unwrap();
            for (p, l) in f.iter().zip(labels) {
                for c in 0..3 {
                    f_sum += (norm.denormalize_force(p[c]) - l[c]).abs();
                    comps += 1;
                }
            }
        }
        let e_ref = e_sum / data.len() as f64;
        assert!((m.energy_mae_ev - e_ref).abs() < 1e-10, "{task}");
        match task {
            TaskKind::IS2RE => assert!(m.force_mae_ev_per_ang.is_none()),
            TaskKind::S2EF => {
                let f_ref = f_sum / comps as f64;
                assert!((m.force_mae_ev_per_ang.unwrap() - f_ref).abs() < 1e-10);
            }
        }
        // evaluation is pure and independent of the batch size
        assert_eq!(m, evaluate(&model, &params, &data, &norm, 3).unwrap());
        let m1 = evaluate(&model, &params, &data, &norm, 1).unwrap();
        assert!((m1.energy_mae_ev - m.energy_mae_ev).abs() < 1e-12);
    }
}

#[test]
fn constant_predictor_error_is_the_mean_absolute_deviation() {
    // zero output weights make the model predict 0 in normalized units, i.e.
    // the training mean in eV
    let model = tiny_model(1);
    let params = model.init_params(0);
    let zeroed: Vec<f64> = params
        .iter()
        .flat_map(|(name, t)| {
            let keep = !name.starts_with("output");
            t.data()
                .iter()
                .map(move |&v| if keep { v } else { 0.0 })
                .collect::<Vec<_>>()
        })
        .collect();
    let params = params.with_values(&zeroed).unwrap();
    let data = synthetic_data(12, (4, 9), 2, TaskKind::IS2RE);
    let norm = Normalizer::fit(&data.energies).unwrap();
    let m = evaluate(&model, &params, &data, &norm, 5).unwrap();
    let mean = data.energies.iter().sum::<f64>() / data.len() as f64;
    let mad = data.energies.iter().map(|e| (e - mean).abs()).sum::<f64>() / data.len() as f64;
    assert!((m.energy_mae_ev - mad).abs() < 1e-12);
}

#[test]
fn shard_losses_add_up_to_the_batch_loss() {
    let model = tiny_model(1);
    let params = perturbed_params(&model, 1, 0.2);
    for task in [TaskKind::IS2RE, TaskKind::S2EF] {
        let data = synthetic_data(6, (4, 8), 5, task);
        let norm = Normalizer::fit(&data.energies).unwrap();
        let full = data.batch(&[0, 1, 2, 3, 4, 5], &norm).unwrap();
        let scale = LossScale::for_batch(&full);
        let whole = batch_loss(&model, &params, &full, &Tape::new(), scale).unwrap();
        let mut parts = 0.0;
        for shard in [&[0usize, 1][..], &[2, 3, 4], &[5]] {
            let b = data.batch(shard, &norm).unwrap();
            parts += batch_loss(&model, &params, &b, &Tape::new(), scale)
                .unwrap()
                .loss
                .item()
                .unwrap();
        }
        assert!((whole.loss.item().unwrap() - parts).abs() < 1e-12, "{task}");
    }
}

#[test]
fn labels_required_by_the_task_are_checked() {
    let mut records = surfml::structures::generate_synthetic(2, 4, 5, 1);
    records[1].forces = None;
    let settings = surfml::tasks::GraphSettings::default();
    assert!(surfml::tasks::TaskData::new(records.clone(), TaskKind::IS2RE, settings).is_ok());
    let err = surfml::tasks::TaskData::new(records.clone(), TaskKind::S2EF, settings).unwrap_err();
    assert!(err.to_string().contains(&records[1].id), "{err}");
}
