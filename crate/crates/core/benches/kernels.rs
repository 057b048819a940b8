//! Hot kernels on one thread versus the whole rayon pool.
//!
//! With `--no-default-features` the crate runs sequentially, so only the
//! `sequential` variant is measured.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use expnet::csp::{csp_feature_matrix, csp_fit};
use expnet::data::{generate, GenSpec, TrialDataset};
use expnet::embed::kl_gradient;
use expnet::layers::{conv2d_backward_batch, conv2d_forward_batch, Mode};
use expnet::model::{ExpandableModel, NetSpec};
use expnet::{RandomStream, Tensor};

fn random(shape: &[usize], rng: &mut RandomStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn dataset() -> TrialDataset {
    let spec = GenSpec {
        n_subjects: 2,
        trials_per_class_per_subject: 20,
        n_channels: 16,
        n_times: 256,
        sample_rate: 128,
        n_classes: 3,
        seed: 1,
        ..GenSpec::default()
    };
    generate(&spec, 1).unwrap()
}

/// Runs `f` under each pool: the calling thread alone, then the global pool.
#[cfg(feature = "parallel")]
fn variants(c: &mut Criterion, group: &str, f: &mut (dyn FnMut() + Send)) {
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let mut g = c.benchmark_group(group);
    g.sample_size(20);
    g.bench_function(BenchmarkId::new("single_thread", 1), |b| {
        b.iter(|| single.install(&mut *f))
    });
    g.bench_function(
        BenchmarkId::new("global_pool", rayon::current_num_threads()),
        |b| b.iter(&mut *f),
    );
    g.finish();
}

#[cfg(not(feature = "parallel"))]
fn variants(c: &mut Criterion, group: &str, f: &mut (dyn FnMut() + Send)) {
    let mut g = c.benchmark_group(group);
    g.sample_size(20);
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| {
        b.iter(&mut *f)
    });
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = RandomStream::new(0, 0);
    let x = random(&[16, 8, 16, 256], &mut rng);
    let k = random(&[16, 8, 1, 32], &mut rng);
    let bias = random(&[16], &mut rng);
    let up = conv2d_forward_batch(&x, &k, &bias).unwrap();
    variants(c, "conv_forward", &mut || {
        std::hint::black_box(conv2d_forward_batch(&x, &k, &bias).unwrap());
    });
    variants(c, "conv_backward", &mut || {
        std::hint::black_box(conv2d_backward_batch(&x, &k, &up).unwrap());
    });
}

fn network(c: &mut Criterion) {
    let data = dataset();
    let spec = NetSpec {
        n_eeg_channels: 16,
        n_timepoints: 256,
        n_classes: 3,
        conv_widths: [8, 16, 32],
        kernel_time: 16,
        linear_width: 16,
        ..NetSpec::default()
    };
    let mut model = ExpandableModel::build(spec, &mut RandomStream::new(0, 1)).unwrap();
    let batch = data.batch(&(0..32).collect::<Vec<_>>());
    variants(c, "model_train_step", &mut || {
        let (p, cache) = model
            .forward(&batch, Mode::Train, &mut RandomStream::new(0, 2))
            .unwrap();
        std::hint::black_box(model.backward(&cache, &p).unwrap());
    });
}

fn tsne_gradient(c: &mut Criterion) {
    let mut rng = RandomStream::new(0, 3);
    let n = 300;
    let y: Vec<f64> = (0..2 * n).map(|_| rng.normal()).collect();
    let raw: Vec<f64> = (0..n * n).map(|_| rng.uniform()).collect();
    let total: f64 = raw.iter().sum();
    let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    variants(c, "tsne_gradient", &mut || {
        std::hint::black_box(kl_gradient(&p, &y, n));
    });
}

fn csp(c: &mut Criterion) {
    let data = dataset();
    let model = csp_fit(&data, [8.0, 30.0], 6).unwrap();
    variants(c, "csp_features", &mut || {
        std::hint::black_box(csp_feature_matrix(&model, &data).unwrap());
    });
}

criterion_group!(benches, conv, network, tsne_gradient, csp);
criterion_main!(benches);
