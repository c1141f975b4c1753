//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use surfml::graph::{radius_graph, Domain, FeatureGraph};
use surfml::models::{Egnn, EgnnConfig, EnergyModel, ParamMap};
use surfml::structures::{generate_synthetic, AtomicStructure};
use surfml::tasks::{
    batch_loss, predict_forces, track_positions, GraphSettings, LossScale, Normalizer, TaskData,
    TaskKind,
};
use surfml::tensor::{apply, finite_difference, grad, Primitive, Tape, Tensor, TensorError};
use surfml::trainer::{
    Callback, CallbackEvent, Control, RunState, Trainer, TrainerConfig, TrainerError,
};

pub type Mat3 = [[f64; 3]; 3];

/// `|a - n| / max(1, |n|)`, maximised over components.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values in `lo..hi` with a random sign, so kinks at zero stay out of reach.
pub fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let t = uniform(rng, shape, lo, hi);
    let data: Vec<f64> = t
        .data()
        .iter()
        .map(|&v| if rng.gen_bool(0.5) { v } else { -v })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Op = Box<dyn Fn(&[&Tensor]) -> Result<Tensor, TensorError>>;

/// One differentiable primitive together with valid random inputs.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub op: Op,
}

fn prim(p: Primitive) -> Op {
    Box::new(move |xs: &[&Tensor]| apply(p.clone(), xs))
}

/// Every recorded primitive, with inputs drawn from `seed`.
pub fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let rows = r.gen_range(1..5);
    let cols = r.gen_range(1..5);
    let inner = r.gen_range(1..5);
    let s = [rows, cols];
    let gather: Vec<usize> = (0..r.gen_range(1..7))
        .map(|_| r.gen_range(0..rows))
        .collect();
    let scatter: Vec<usize> = (0..rows).map(|_| r.gen_range(0..3)).collect();
    let mask: Vec<bool> = (0..rows * cols).map(|_| r.gen_bool(0.4)).collect();
    let start = r.gen_range(0..cols);
    let len = r.gen_range(0..=cols - start);
    let c = r.gen_range(-2.0..2.0);
    let case = |name, inputs, op| PrimitiveCase { name, inputs, op };
    vec![
        case(
            "add",
            vec![uniform(r, &s, -2.0, 2.0), uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::Add),
        ),
        case(
            "sub",
            vec![uniform(r, &s, -2.0, 2.0), uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::Sub),
        ),
        case(
            "mul",
            vec![uniform(r, &s, -2.0, 2.0), uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::Mul),
        ),
        case(
            "div",
            vec![uniform(r, &s, -2.0, 2.0), signed(r, &s, 0.5, 2.0)],
            prim(Primitive::Div),
        ),
        case("neg", vec![uniform(r, &s, -2.0, 2.0)], prim(Primitive::Neg)),
        case(
            "scale",
            vec![uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::Scale(c)),
        ),
        case(
            "shift",
            vec![uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::Shift(c)),
        ),
        case(
            "matmul",
            vec![
                uniform(r, &[rows, inner], -2.0, 2.0),
                uniform(r, &[inner, cols], -2.0, 2.0),
            ],
            prim(Primitive::MatMul),
        ),
        case(
            "transpose",
            vec![uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::Transpose),
        ),
        case(
            "sum",
            vec![uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::SumAll),
        ),
        case(
            "sum_axis",
            vec![uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::SumAxis {
                axis: 0,
                keepdim: false,
            }),
        ),
        case(
            "sum_axis_keepdim",
            vec![uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::SumAxis {
                axis: 1,
                keepdim: true,
            }),
        ),
        case("abs", vec![signed(r, &s, 0.1, 2.0)], prim(Primitive::Abs)),
        case(
            "square",
            vec![uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::Square),
        ),
        case(
            "sqrt",
            vec![uniform(r, &s, 0.2, 3.0)],
            prim(Primitive::Sqrt),
        ),
        case("exp", vec![uniform(r, &s, -2.0, 2.0)], prim(Primitive::Exp)),
        case("relu", vec![signed(r, &s, 0.1, 2.0)], prim(Primitive::Relu)),
        case(
            "concat",
            vec![
                uniform(r, &s, -2.0, 2.0),
                uniform(r, &[rows, inner], -2.0, 2.0),
            ],
            prim(Primitive::Concat { axis: 1 }),
        ),
        case(
            "slice",
            vec![uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::Slice {
                axis: 1,
                start,
                len,
            }),
        ),
        case(
            "pad",
            vec![uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::Pad {
                axis: 0,
                start: 1,
                total: rows + 2,
            }),
        ),
        case(
            "broadcast_to",
            vec![uniform(r, &[1, cols], -2.0, 2.0)],
            prim(Primitive::BroadcastTo {
                shape: vec![rows, cols],
            }),
        ),
        case(
            "sum_to",
            vec![uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::SumTo {
                shape: vec![1, cols],
            }),
        ),
        case(
            "reshape",
            vec![uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::Reshape {
                shape: vec![rows * cols],
            }),
        ),
        case(
            "gather_rows",
            vec![uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::GatherRows {
                index: gather.into(),
            }),
        ),
        case(
            "scatter_add_rows",
            vec![uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::ScatterAddRows {
                index: scatter.into(),
                rows: 3,
            }),
        ),
        case(
            "masked_fill",
            vec![uniform(r, &s, -2.0, 2.0)],
            prim(Primitive::MaskedFill {
                mask: mask.into(),
                value: c,
            }),
        ),
    ]
}

/// Scalar probe `sum(op(xs) * w)` with fixed random weights.
fn weighted(op: &Op, xs: &[&Tensor], w: &Tensor) -> Result<Tensor, TensorError> {
    op(xs)?.mul(w)?.sum()
}

fn probe_weights(case: &PrimitiveCase, seed: u64) -> Tensor {
    let refs: Vec<&Tensor> = case.inputs.iter().collect();
    let out = (case.op)(&refs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    uniform(&mut rng, out.shape(), -1.0, 1.0)
}

/// Largest relative error between the tape gradient and central
/// differences, over every input of the case.
pub fn primitive_first_order_error(case: &PrimitiveCase, seed: u64) -> f64 {
    let w = probe_weights(case, seed);
    let tape = Tape::new();
    let tracked: Vec<Tensor> = case.inputs.iter().map(|x| x.track(&tape)).collect();
    let refs: Vec<&Tensor> = tracked.iter().collect();
    let y = weighted(&case.op, &refs, &w).unwrap();
    let grads = grad(&y, &refs, false).unwrap();
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        let fd = finite_difference(
            |probe| {
                let mut xs: Vec<&Tensor> = case.inputs.iter().collect();
                xs[k] = probe;
                weighted(&case.op, &xs, &w)?.item()
            },
            &case.inputs[k],
            1e-5,
        )
        .unwrap();
        worst = worst.max(rel_err(g.data(), fd.data()));
    }
    worst
}

/// Second-order check: the gradient of `<grad(y), v>` taken through a
/// recorded backward pass against central differences of the first gradient.
pub fn primitive_second_order_error(case: &PrimitiveCase, seed: u64) -> f64 {
    let w = probe_weights(case, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let dirs: Vec<Tensor> = case
        .inputs
        .iter()
        .map(|x| uniform(&mut rng, x.shape(), -1.0, 1.0))
        .collect();
    let inner =
        |xs: &[Tensor], create: bool, tape: &Tape| -> Result<(Tensor, Vec<Tensor>), TensorError> {
            let tracked: Vec<Tensor> = xs.iter().map(|x| x.track(tape)).collect();
            let refs: Vec<&Tensor> = tracked.iter().collect();
            let y = weighted(&case.op, &refs, &w)?;
            let g = grad(&y, &refs, create)?;
            let mut s = Tensor::scalar(0.0);
            for (gk, vk) in g.iter().zip(&dirs) {
                s = s.add(&gk.mul(vk)?.sum()?)?;
            }
            Ok((s, tracked))
        };
    let tape = Tape::new();
    let (s, tracked) = inner(&case.inputs, true, &tape).unwrap();
    let refs: Vec<&Tensor> = tracked.iter().collect();
    let second = grad(&s, &refs, false).unwrap();
    let mut worst: f64 = 0.0;
    for (k, g) in second.iter().enumerate() {
        let fd = finite_difference(
            |probe| {
                let mut xs = case.inputs.clone();
                xs[k] = probe.clone();
                inner(&xs, false, &Tape::new())?.0.item()
            },
            &case.inputs[k],
            1e-5,
        )
        .unwrap();
        worst = worst.max(rel_err(g.data(), fd.data()));
    }
    worst
}

/// A small E(n)-GNN that keeps finite-difference checks cheap.
pub fn tiny_config(layers: usize) -> EgnnConfig {
    EgnnConfig {
        embed_dim: 4,
        message_dim: 4,
        num_layers: layers,
        node_mlp_dims: vec![5],
        edge_mlp_dims: vec![4],
        pos_mlp_dims: vec![5],
        node_proj_depth: 1,
        node_proj_hidden: 6,
        out_depth: 2,
        out_hidden: 5,
        ..EgnnConfig::default()
    }
}

pub fn tiny_model(layers: usize) -> Egnn {
    Egnn::new(tiny_config(layers)).unwrap()
}

pub fn reference_model() -> Egnn {
    Egnn::new(EgnnConfig::default()).unwrap()
}

/// Initial parameters plus uniform noise, so biases are non-zero too.
pub fn perturbed_params(model: &dyn EnergyModel, seed: u64, amount: f64) -> ParamMap {
    let params = model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let flat: Vec<f64> = params
        .flatten()
        .into_iter()
        .map(|v| v + rng.gen_range(-amount..amount))
        .collect();
    params.with_values(&flat).unwrap()
}

pub fn synthetic_data(n: usize, atoms: (usize, usize), seed: u64, task: TaskKind) -> TaskData {
    TaskData::new(
        generate_synthetic(n, atoms.0, atoms.1, seed),
        task,
        GraphSettings::default(),
    )
    .unwrap()
}

/// Uniformly random rotation: a unit quaternion from rejection sampling in
/// the 4-ball.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            let n = n2.sqrt();
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn rotate(r: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (0..3).map(|j| r[i][j] * v[j]).sum();
    }
    out
}

pub fn rows3(t: &Tensor) -> Vec<[f64; 3]> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub fn with_positions(graph: &FeatureGraph, positions: &[[f64; 3]]) -> FeatureGraph {
    graph
        .clone()
        .set_feature(Domain::Node, "pos", Tensor::from_rows3(positions))
        .unwrap()
}

/// Structure with atoms reordered so that new atom `k` is old atom `perm[k]`.
pub fn permute_structure(s: &AtomicStructure, perm: &[usize]) -> AtomicStructure {
    AtomicStructure {
        id: s.id.clone(),
        atomic_numbers: perm.iter().map(|&i| s.atomic_numbers[i]).collect(),
        positions: perm.iter().map(|&i| s.positions[i]).collect(),
        tags: perm.iter().map(|&i| s.tags[i]).collect(),
        energy: s.energy,
        forces: s
            .forces
            .as_ref()
            .map(|f| perm.iter().map(|&i| f[i]).collect()),
        cell: s.cell,
    }
}

/// Location of the shipped devset.
pub fn devset_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/devset.jsonl")
}

/// Relative error of the parameter gradient of the training loss on the whole
/// of `data`, against central differences over every parameter scalar.
pub fn loss_param_grad_error(model: &dyn EnergyModel, params: &ParamMap, data: &TaskData) -> f64 {
    let normalizer = Normalizer::fit(&data.energies).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let batch = data.batch(&idx, &normalizer).unwrap();
    let scale = LossScale::for_batch(&batch);
    let tape = Tape::new();
    let tracked = params.track(&tape);
    let terms = batch_loss(model, &tracked, &batch, &tape, scale).unwrap();
    let wrt: Vec<&Tensor> = tracked.iter().map(|(_, t)| t).collect();
    let analytic: Vec<f64> = grad(&terms.loss, &wrt, false)
        .unwrap()
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();
    let numeric = finite_difference(
        |flat| {
            let p = params.with_values(flat.data())?;
            let tape = Tape::new();
            batch_loss(model, &p, &batch, &tape, scale)
                .unwrap()
                .loss
                .item()
        },
        &Tensor::vector(params.flatten()),
        1e-6,
    )
    .unwrap();
    rel_err(&analytic, numeric.data())
}

/// Energy and forces of a single graph.
pub fn energy_forces(
    model: &dyn EnergyModel,
    params: &ParamMap,
    graph: &FeatureGraph,
) -> (f64, Vec<[f64; 3]>) {
    let tape = Tape::new();
    let g = track_positions(graph, &tape).unwrap();
    let out = predict_forces(model, params, &g, false).unwrap();
    (out.energies.item().unwrap(), rows3(&out.forces))
}

/// Relative error between predicted forces and minus the central difference
/// of the predicted energy, with the neighbour list held fixed.
pub fn force_fd_error(model: &dyn EnergyModel, params: &ParamMap, graph: &FeatureGraph) -> f64 {
    let (_, forces) = energy_forces(model, params, graph);
    let pos = graph.node("pos").unwrap().detach();
    let numeric = finite_difference(
        |p| {
            let g = graph
                .clone()
                .set_feature(Domain::Node, "pos", p.clone())
                .unwrap();
            model.forward(params, &g).unwrap().sum()?.item()
        },
        &pos,
        1e-5,
    )
    .unwrap();
    let analytic: Vec<f64> = forces.iter().flatten().map(|f| -f).collect();
    rel_err(&analytic, numeric.data())
}

#[derive(Debug, Default, Clone, Copy)]
pub struct EquivarianceErrors {
    pub energy: f64,
    pub forces: f64,
    pub force_sum: f64,
}

/// Worst deviations over `trials` random rigid motions and atom permutations
/// of `structure`.
pub fn equivariance_errors(
    model: &dyn EnergyModel,
    params: &ParamMap,
    structure: &AtomicStructure,
    trials: usize,
    seed: u64,
) -> EquivarianceErrors {
    let settings = GraphSettings::default();
    let graph = radius_graph(structure, settings.cutoff, settings.max_neighbors).unwrap();
    let (e0, f0) = energy_forces(model, params, &graph);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = EquivarianceErrors::default();
    let sum_err = |f: &[[f64; 3]]| {
        (0..3)
            .map(|c| f.iter().map(|r| r[c]).sum::<f64>().abs())
            .fold(0.0, f64::max)
    };
    out.force_sum = sum_err(&f0);
    for _ in 0..trials {
        let r = random_rotation(&mut rng);
        let t = [
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        ];
        let moved: Vec<[f64; 3]> = structure
            .positions
            .iter()
            .map(|p| {
                let q = rotate(&r, p);
                [q[0] + t[0], q[1] + t[1], q[2] + t[2]]
            })
            .collect();
        let (e1, f1) = energy_forces(model, params, &with_positions(&graph, &moved));
        out.energy = out.energy.max((e1 - e0).abs());
        for (a, b) in f0.iter().zip(&f1) {
            let ra = rotate(&r, a);
            for c in 0..3 {
                out.forces = out.forces.max((ra[c] - b[c]).abs());
            }
        }
        out.force_sum = out.force_sum.max(sum_err(&f1));

        let mut perm: Vec<usize> = (0..structure.num_atoms()).collect();
        perm.shuffle(&mut rng);
        let permuted = permute_structure(structure, &perm);
        let pg = radius_graph(&permuted, settings.cutoff, settings.max_neighbors).unwrap();
        let (e2, f2) = energy_forces(model, params, &pg);
        out.energy = out.energy.max((e2 - e0).abs());
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..3 {
                out.forces = out.forces.max((f2[k][c] - f0[i][c]).abs());
            }
        }
    }
    out
}

/// Random structure with `n` atoms in a cube of side `side`; atom 0 is
/// always adsorbate so point clouds can be built from it.
pub fn random_structure(rng: &mut ChaCha8Rng, id: usize, n: usize, side: f64) -> AtomicStructure {
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(0.0..side),
                rng.gen_range(0.0..side),
                rng.gen_range(0.0..side),
            ]
        })
        .collect();
    let tags: Vec<u8> = (0..n)
        .map(|i| if i == 0 { 2 } else { rng.gen_range(0..3) })
        .collect();
    AtomicStructure {
        id: format!("rand-{id}"),
        atomic_numbers: (0..n).map(|_| rng.gen_range(1..=100)).collect(),
        positions,
        tags,
        energy: Some(rng.gen_range(-3.0..1.0)),
        forces: None,
        cell: None,
    }
}

/// O(N^2) reference neighbour list: for each destination the nearest
/// `max_neighbors` sources within `cutoff` (ties to the lower index), edges
/// ordered by destination then source.
pub fn brute_force_edges(
    s: &AtomicStructure,
    cutoff: f64,
    max_neighbors: usize,
) -> Vec<(usize, usize)> {
    let n = s.num_atoms();
    let mut edges = Vec::new();
    for i in 0..n {
        let mut near: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d: f64 = (0..3)
                    .map(|c| (s.positions[i][c] - s.positions[j][c]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                (d, j)
            })
            .filter(|&(d, _)| d > 0.0 && d <= cutoff)
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(max_neighbors);
        let mut js: Vec<usize> = near.into_iter().map(|(_, j)| j).collect();
        js.sort_unstable();
        edges.extend(js.into_iter().map(|j| (j, i)));
    }
    edges
}

/// Records callback events and the parameters after every batch.
#[derive(Clone, Default)]
pub struct Recorder {
    pub events: Arc<Mutex<Vec<(CallbackEvent, usize, u64)>>>,
    pub params: Arc<Mutex<Vec<Vec<f64>>>>,
}

impl Recorder {
    pub fn events(&self) -> Vec<(CallbackEvent, usize, u64)> {
        self.events.lock().unwrap().clone()
    }

    pub fn params(&self) -> Vec<Vec<f64>> {
        self.params.lock().unwrap().clone()
    }

    fn push(&self, e: CallbackEvent, run: &RunState) {
        self.events.lock().unwrap().push((e, run.epoch, run.step));
    }
}

impl Callback for Recorder {
    fn on_fit_start(&mut self, run: &RunState) -> Result<Control, TrainerError> {
        self.push(CallbackEvent::FitStart, run);
        Ok(Control::Continue)
    }
    fn on_train_batch_end(&mut self, run: &RunState) -> Result<Control, TrainerError> {
        self.push(CallbackEvent::TrainBatchEnd, run);
        self.params.lock().unwrap().push(run.state.params.flatten());
        Ok(Control::Continue)
    }
    fn on_train_epoch_end(&mut self, run: &RunState) -> Result<Control, TrainerError> {
        self.push(CallbackEvent::TrainEpochEnd, run);
        Ok(Control::Continue)
    }
    fn on_validation_epoch_end(&mut self, run: &RunState) -> Result<Control, TrainerError> {
        self.push(CallbackEvent::ValidationEpochEnd, run);
        Ok(Control::Continue)
    }
    fn on_fit_end(&mut self, run: &RunState) -> Result<Control, TrainerError> {
        self.push(CallbackEvent::FitEnd, run);
        Ok(Control::Continue)
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Worst per-step parameter difference between two recorded trajectories.
pub fn trajectory_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len(), "different number of steps");
    a.iter()
        .zip(b)
        .map(|(x, y)| max_abs_diff(x, y))
        .fold(0.0, f64::max)
}

/// Parameters after every batch of a run with the given strategy.
pub fn step_trajectory(
    model: &dyn EnergyModel,
    data: &TaskData,
    config: TrainerConfig,
) -> Vec<Vec<f64>> {
    let rec = Recorder::default();
    let mut trainer = Trainer::new(model, config)
        .unwrap()
        .with_callback(rec.clone())
        .with_launcher(surfml::trainer::process::ThreadLauncher);
    trainer.fit(data, None, None).unwrap();
    rec.params()
}
