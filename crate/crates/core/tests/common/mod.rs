#![allow(dead_code)]

use expnet::data::TrialDataset;
use expnet::embed::{joint_p, kl_divergence, kl_gradient};
use expnet::layers::{BatchNorm, Cache, Layer, Mode, RunningStats};
use expnet::model::{ExpandInit, ExpandableModel, NetSpec};
use expnet::train::{
    add_penalty_grad, cross_entropy_logit_grad, loss_eq1, loss_eq2, one_hot, LossConfig, Objective,
};
use expnet::{RandomStream, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

/// Relative error with a floor on the denominator, so that gradients that
/// are zero up to rounding do not divide by ~0.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` at `x[i]`.
pub fn central_diff(x: &mut [f64], i: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + FD_STEP;
    let up = f(x);
    x[i] = orig - FD_STEP;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * FD_STEP)
}

pub fn random_tensor(shape: &[usize], rng: &mut RandomStream, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.normal())
}

/// Values away from zero, for inputs of piecewise functions.
pub fn nonzero_tensor(shape: &[usize], rng: &mut RandomStream) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.normal();
        v + 0.1 * v.signum()
    })
}

pub fn small_spec() -> NetSpec {
    NetSpec {
        n_eeg_channels: 3,
        n_timepoints: 24,
        n_classes: 3,
        conv_widths: [2, 3, 4],
        kernel_time: 4,
        linear_width: 5,
        dropout_p: 0.25,
        ..NetSpec::default()
    }
}

/// Dataset of random trials matching `spec`, labels cycling over classes.
pub fn random_dataset(spec: &NetSpec, n: usize, seed: u64) -> TrialDataset {
    let mut rng = RandomStream::new(seed, 0);
    let (c, t) = (spec.n_eeg_channels, spec.n_timepoints);
    TrialDataset::new(
        random_tensor(&[n, c, t], &mut rng, 1.0),
        (0..n as u32).map(|i| i % spec.n_classes as u32).collect(),
        spec.n_classes,
        128,
        vec![0; n],
        vec![1; n],
        (0..n as u32).collect(),
    )
    .unwrap()
}

/// Scalar probe `Σ r ⊙ layer(x)`; checks d/dx and d/dθ for every entry.
pub fn check_layer(layer: &Layer, x: &Tensor, mode: Mode, seed: u64) -> f64 {
    let mask_seed = RandomStream::new(seed, 99);
    let run = |l: &Layer, input: &Tensor| -> (Tensor, Cache) {
        let mut l = l.clone();
        l.forward(input, mode, &mut mask_seed.clone()).unwrap()
    };
    let (y, cache) = run(layer, x);
    let mut rng = RandomStream::new(seed, 7);
    let r = random_tensor(y.shape(), &mut rng, 1.0);
    let probe = |y: &Tensor| {
        y.data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let grad = layer.backward(&cache, &r).unwrap();

    let mut worst: f64 = 0.0;
    let mut xs = x.data().to_vec();
    for i in 0..xs.len() {
        let num = central_diff(&mut xs, i, |v| {
            probe(&run(layer, &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap()).0)
        });
        worst = worst.max(rel_err(grad.d_input.data()[i], num));
    }
    for p in 0..layer.params().len() {
        let shape = layer.params()[p].shape().to_vec();
        let mut ps = layer.params()[p].data().to_vec();
        for i in 0..ps.len() {
            let num = central_diff(&mut ps, i, |v| {
                let mut l = layer.clone();
                *l.params_mut()[p] = Tensor::new(shape.clone(), v.to_vec()).unwrap();
                probe(&run(&l, x).0)
            });
            worst = worst.max(rel_err(grad.d_params[p].data()[i], num));
        }
    }
    worst
}

fn assert_layer(name: &str, make: impl Fn(&mut RandomStream) -> (Layer, Tensor, Mode)) {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = RandomStream::new(seed, 1);
        let (layer, x, mode) = make(&mut rng);
        worst = worst.max(check_layer(&layer, &x, mode, seed));
    }
    assert!(worst < FD_TOL, "{name}: max relative error {worst:e}");
}

/// Perturb every parameter and keep it at least 1e-3 from zero, well
/// outside the finite-difference step, so L1 kinks are not crossed.
pub fn jitter_params(model: &mut ExpandableModel, rng: &mut RandomStream) {
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += 0.05 * rng.normal();
            if v.abs() < 1e-3 {
                *v = if *v < 0.0 { -1e-3 } else { 1e-3 };
            }
        }
    }
}

/// Full-model objective check: forward in train mode with a fixed dropout
/// stream, cross-entropy plus `objective` penalty.
pub fn check_objective(
    model: &ExpandableModel,
    x: &Tensor,
    labels: &[u32],
    objective: Objective,
    loss: impl Fn(&Tensor, &Tensor, &ExpandableModel) -> f64,
    seed: u64,
) -> f64 {
    let y = one_hot(labels, model.spec().n_classes);
    let stream = RandomStream::new(seed, 5);
    let eval = |m: &ExpandableModel| {
        let mut m = m.clone();
        let (p, _) = m.forward(x, Mode::Train, &mut stream.clone()).unwrap();
        loss(&p, &y, &m)
    };
    let mut m = model.clone();
    let (p, cache) = m.forward(x, Mode::Train, &mut stream.clone()).unwrap();
    let mut grads = model
        .backward(&cache, &cross_entropy_logit_grad(&p, &y).unwrap())
        .unwrap();
    add_penalty_grad(model, &objective, &mut grads);

    let mut worst: f64 = 0.0;
    for (k, gk) in grads.iter().enumerate() {
        let shape = model.params()[k].shape().to_vec();
        let mut v = model.params()[k].data().to_vec();
        // every entry of small tensors, a strided sample of large ones
        let stride = (v.len() / 40).max(1);
        for i in (0..v.len()).step_by(stride) {
            let num = central_diff(&mut v, i, |vals| {
                let mut mm = model.clone();
                *mm.params_mut()[k] = Tensor::new(shape.clone(), vals.to_vec()).unwrap();
                eval(&mm)
            });
            worst = worst.max(rel_err(gk.data()[i], num));
        }
    }
    worst
}

/// Layers covered by the gradient suite.
pub const LAYER_CASES: [&str; 9] = [
    "conv2d",
    "batchnorm/train",
    "batchnorm/eval",
    "elu",
    "avgpool",
    "dropout",
    "linear",
    "flatten",
    "softmax",
];

/// A random layer instance and input for one of [`LAYER_CASES`].
pub fn layer_case(name: &str, rng: &mut RandomStream) -> (Layer, Tensor, Mode) {
    match name {
        "conv2d" => {
            let (b, ci, co) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
            let (h, w) = (1 + rng.below(3), 4 + rng.below(4));
            let (kh, kw) = (1 + rng.below(h), 1 + rng.below(3));
            let layer = Layer::Conv2d {
                weight: random_tensor(&[co, ci, kh, kw], rng, 0.5),
                bias: random_tensor(&[co], rng, 0.5),
            };
            (layer, random_tensor(&[b, ci, h, w], rng, 1.0), Mode::Train)
        }
        "batchnorm/train" => {
            let c = 1 + rng.below(3);
            let mut bn = BatchNorm::new(c);
            bn.gamma = random_tensor(&[c], rng, 1.0);
            bn.beta = random_tensor(&[c], rng, 1.0);
            let shape = [2 + rng.below(2), c, 1 + rng.below(2), 3 + rng.below(3)];
            (
                Layer::BatchNorm(bn),
                random_tensor(&shape, rng, 2.0),
                Mode::Train,
            )
        }
        "batchnorm/eval" => {
            let c = 1 + rng.below(3);
            let mut bn = BatchNorm::new(c);
            bn.gamma = random_tensor(&[c], rng, 1.0);
            bn.beta = random_tensor(&[c], rng, 1.0);
            bn.running = Some(RunningStats {
                mean: (0..c).map(|_| rng.normal()).collect(),
                var: (0..c).map(|_| 0.5 + rng.uniform()).collect(),
            });
            let shape = [1 + rng.below(2), c, 1, 3 + rng.below(3)];
            (
                Layer::BatchNorm(bn),
                random_tensor(&shape, rng, 1.0),
                Mode::Eval,
            )
        }
        "elu" => (Layer::Elu, nonzero_tensor(&[2, 2, 1, 5], rng), Mode::Train),
        "avgpool" => {
            let w = 1 + rng.below(3);
            (
                Layer::AvgPool { width: w },
                random_tensor(&[2, 2, 1, 7], rng, 1.0),
                Mode::Train,
            )
        }
        "dropout" => (
            Layer::Dropout { p: 0.3 },
            random_tensor(&[2, 3, 1, 4], rng, 1.0),
            Mode::Train,
        ),
        "linear" => {
            let (i, o) = (1 + rng.below(5), 1 + rng.below(4));
            let layer = Layer::Linear {
                weight: random_tensor(&[o, i], rng, 0.5),
                bias: random_tensor(&[o], rng, 0.5),
            };
            (layer, random_tensor(&[2, 3, 1, i], rng, 1.0), Mode::Train)
        }
        "flatten" => (
            Layer::Flatten,
            random_tensor(&[2, 3, 1, 2], rng, 1.0),
            Mode::Train,
        ),
        "softmax" => {
            let k = 2 + rng.below(5);
            (
                Layer::Softmax,
                random_tensor(&[3, k], rng, 2.0),
                Mode::Train,
            )
        }
        other => panic!("unknown layer case {other}"),
    }
}

/// Worst relative error of one layer case over [`INSTANCES`] seeds.
pub fn layer_worst(name: &str) -> f64 {
    (0..INSTANCES)
        .map(|seed| {
            let (layer, x, mode) = layer_case(name, &mut RandomStream::new(seed, 1));
            check_layer(&layer, &x, mode, seed)
        })
        .fold(0.0, f64::max)
}

pub fn loss_eq1_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = RandomStream::new(seed, 2);
        let mut model = ExpandableModel::build(small_spec(), &mut rng).unwrap();
        jitter_params(&mut model, &mut rng);
        let x = random_tensor(&[4, 3, 24], &mut rng, 1.0);
        let labels = [0, 1, 2, (seed % 3) as u32];
        let lambda = 1e-2;
        worst = worst.max(check_objective(
            &model,
            &x,
            &labels,
            Objective::Sparse { lambda },
            |p, y, m| loss_eq1(p, y, m, lambda).unwrap(),
            seed,
        ));
    }
    worst
}

/// Group-sparse objective on a model with added groups in every layer.
pub fn loss_eq2_worst() -> f64 {
    let cfg = LossConfig {
        lambda: 0.0,
        delta: 1e-3,
        delta_g: 5e-2,
    };
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = RandomStream::new(seed, 3);
        let mut model = ExpandableModel::build(small_spec(), &mut rng).unwrap();
        for layer in 1..=3 {
            model
                .expand(
                    layer,
                    1 + (seed as usize % 2),
                    ExpandInit::SmallRandom,
                    &mut rng,
                )
                .unwrap();
        }
        jitter_params(&mut model, &mut rng);
        let x = random_tensor(&[4, 3, 24], &mut rng, 1.0);
        let labels = [2, 1, 0, (seed % 3) as u32];
        worst = worst.max(check_objective(
            &model,
            &x,
            &labels,
            Objective::group_sparse(&cfg),
            |p, y, m| loss_eq2(p, y, m, &cfg).unwrap(),
            seed,
        ));
    }
    worst
}

pub fn tsne_kl_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = RandomStream::new(seed, 4);
        let (n, d) = (10, 4);
        let x: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
        let (p, _) = joint_p(&x, n, d, 3.0);
        let mut y: Vec<f64> = (0..2 * n).map(|_| rng.normal()).collect();
        let g = kl_gradient(&p, &y, n);
        for (i, &gi) in g.iter().enumerate() {
            let num = central_diff(&mut y, i, |v| kl_divergence(&p, v, n));
            worst = worst.max(rel_err(gi, num));
        }
    }
    worst
}

/// Model whose batch-norm layers have running statistics.
pub fn warmed_model(spec: NetSpec, seed: u64) -> ExpandableModel {
    let mut rng = RandomStream::new(seed, 0);
    let mut m = ExpandableModel::build(spec.clone(), &mut rng).unwrap();
    let x = random_tensor(&[6, spec.n_eeg_channels, spec.n_timepoints], &mut rng, 1.0);
    m.forward(&x, Mode::Train, &mut rng).unwrap();
    m
}

pub fn eval_logits(m: &ExpandableModel, x: &Tensor) -> Tensor {
    let mut m = m.clone();
    let (_, cache) = m
        .forward(x, Mode::Eval, &mut RandomStream::new(0, 0))
        .unwrap();
    cache.logits
}

pub fn probe_inputs(spec: &NetSpec, n: usize, seed: u64) -> Tensor {
    random_tensor(
        &[n, spec.n_eeg_channels, spec.n_timepoints],
        &mut RandomStream::new(seed, 3),
        1.0,
    )
}

/// Largest logit change over 100 random inputs after widening every
/// layer with `init`.
pub fn expansion_logit_change(init: ExpandInit, seed: u64) -> f64 {
    let spec = small_spec();
    let model = warmed_model(spec.clone(), seed);
    let x = probe_inputs(&spec, 100, seed);
    let before = eval_logits(&model, &x);
    let mut m = model.clone();
    let mut rng = RandomStream::new(seed + 1, 0);
    for layer in 1..=3 {
        m.expand(layer, 2, init, &mut rng).unwrap();
    }
    before.max_abs_diff(&eval_logits(&m, &x))
}

/// Largest logit change over 100 random inputs from pruning a zero-norm
/// group, plus the ids pruned.
pub fn prune_logit_change(seed: u64) -> (f64, Vec<u32>) {
    let spec = small_spec();
    let model = warmed_model(spec.clone(), seed);
    let x = probe_inputs(&spec, 100, seed);
    let before = eval_logits(&model, &x);
    let mut m = model.clone();
    let mut rng = RandomStream::new(seed + 1, 0);
    // widening layer 3 after layer 2 would give the layer-2 group random
    // fan-out weights, so order matters here
    m.expand(3, 1, ExpandInit::SmallRandom, &mut rng).unwrap();
    m.expand(2, 3, ExpandInit::Zero, &mut rng).unwrap();
    let (pruned, _) = m.prune_groups(1e-12).unwrap();
    (before.max_abs_diff(&eval_logits(&m, &x)), pruned)
}

/// Sum of squares over a group's weights by explicit index arithmetic on
/// the flat parameter buffers.
pub fn flat_group_norm(m: &ExpandableModel, layer: usize, channels: std::ops::Range<usize>) -> f64 {
    let params = m.params();
    let conv = [0, 4, 8][layer];
    let fanout = [4, 8, 14][layer];
    let w = params[conv];
    let per_filter = w.len() / w.dim(0);
    let mut ss = 0.0;
    for c in channels.clone() {
        for k in 0..per_filter {
            ss += w.data()[c * per_filter + k].powi(2);
        }
    }
    let f = params[fanout];
    let rows = f.dim(0);
    let cols = f.dim(1);
    let inner = f.len() / (rows * cols);
    let per_channel = if layer == 2 { m.spec().linear_width } else { 1 };
    for r in 0..rows {
        for c in channels.start * per_channel..channels.end * per_channel {
            for k in 0..inner {
                ss += f.data()[(r * cols + c) * inner + k].powi(2);
            }
        }
    }
    ss.sqrt()
}

/// Largest relative gap between `group_norm` and [`flat_group_norm`] over
/// ten widened models.
pub fn group_norm_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = RandomStream::new(seed, 8);
        let mut m = ExpandableModel::build(small_spec(), &mut rng).unwrap();
        for layer in 1..=3 {
            m.expand(layer, 1 + rng.below(3), ExpandInit::SmallRandom, &mut rng)
                .unwrap();
        }
        // give fan-out slices non-zero weights
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v += 0.1 * rng.normal();
            }
        }
        let groups: Vec<_> = m
            .ledger()
            .live_added()
            .map(|(l, g)| (l, g.clone()))
            .collect();
        for (l, g) in groups {
            let got = m.group_norm(g.group_id).unwrap();
            let want = flat_group_norm(&m, l, g.channels.clone());
            worst = worst.max((got - want).abs() / want.max(1.0));
        }
    }
    worst
}
