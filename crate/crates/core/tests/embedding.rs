//! Feature export, t-SNE and clustering scores on trained networks.

mod common;

use common::*;
use expnet::embed::{
    cluster_quality, extract_features, pca_reduce, tsne, FeatureMatrix, TsneConfig,
};
use expnet::layers::Mode;
use expnet::model::{ExpandInit, ExpandableModel, NetSpec};
use expnet::RandomStream;

fn blobs(n_per: usize, d: usize, spread: f64, seed: u64) -> FeatureMatrix {
    let mut rng = RandomStream::new(seed, 0);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for k in 0..3u32 {
        let center: Vec<f64> = (0..d)
            .map(|j| if j % 3 == k as usize { 8.0 } else { 0.0 })
            .collect();
        for _ in 0..n_per {
            data.extend(center.iter().map(|c| c + spread * rng.normal()));
            labels.push(k);
        }
    }
    let n = labels.len();
    FeatureMatrix {
        data,
        n,
        d,
        sessions: vec![1; n],
        labels,
        widths: [0, 0, 0],
    }
}

#[test]
fn feature_width_is_w3_times_linear_width() {
    let spec = small_spec();
    let data = random_dataset(&spec, 10, 1);
    let mut rng = RandomStream::new(1, 0);
    let mut m = ExpandableModel::build(spec.clone(), &mut rng).unwrap();
    m.forward(&data.batch(&[0, 1, 2, 3]), Mode::Train, &mut rng)
        .unwrap();
    let f = extract_features(&m, &data).unwrap();
    assert_eq!((f.n, f.d), (10, spec.conv_widths[2] * spec.linear_width));
    assert_eq!(f.labels, data.labels);
    m.expand(3, 3, ExpandInit::SmallRandom, &mut rng).unwrap();
    let g = extract_features(&m, &data).unwrap();
    assert_eq!(g.d, (spec.conv_widths[2] + 3) * spec.linear_width);
    assert_eq!(g.widths, m.widths());
    // zero fan-out leaves the old features in place
    for i in 0..10 {
        assert_eq!(&g.row(i)[..f.d], f.row(i));
    }
}

#[test]
fn default_network_exports_50176_features() {
    assert_eq!(NetSpec::default().feature_dim(), 50176);
}

#[test]
fn tsne_is_deterministic_and_descends() {
    let f = blobs(15, 6, 1.0, 2);
    let cfg = TsneConfig {
        perplexity: 10.0,
        seed: 4,
        ..TsneConfig::default()
    };
    let a = tsne(&f, &cfg).unwrap();
    let b = tsne(&f, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.coords.len(), 2 * f.n);
    assert!(a.final_kl < a.kl_after_exaggeration);
    assert!(a.final_kl >= 0.0);
    // well-separated inputs stay separated
    assert!(cluster_quality(&a.coords, 2, &f.labels).unwrap() > 0.8);
    let c = tsne(&f, &TsneConfig { seed: 5, ..cfg }).unwrap();
    assert_ne!(a.coords, c.coords);
}

#[test]
fn tsne_clamps_perplexity_for_small_sets() {
    let f = blobs(3, 4, 0.5, 3);
    let cfg = TsneConfig {
        iterations: 50,
        ..TsneConfig::default()
    };
    let r = tsne(&f, &cfg).unwrap();
    assert!((r.perplexity - (9.0 - 1.0) / 3.0).abs() < 1e-12);
    let tiny = blobs(1, 4, 0.5, 3);
    assert!(tsne(&tiny, &cfg).is_err());
}

#[test]
fn pca_keeps_the_dominant_structure() {
    let f = blobs(20, 60, 0.5, 4);
    let reduced = pca_reduce(&f, 5, &mut RandomStream::new(0, 0));
    assert_eq!((reduced.n, reduced.d), (60, 5));
    let before = cluster_quality(&f.data, f.d, &f.labels).unwrap();
    let after = cluster_quality(&reduced.data, reduced.d, &reduced.labels).unwrap();
    assert!(after >= before - 1e-6, "{before} -> {after}");
}
