//! Activation shapes through the default architecture.

mod common;

use common::*;
use expnet::layers::{layer_forward, Mode};
use expnet::model::{ExpandableModel, NetSpec};
use expnet::RandomStream;

/// Walk the default network layer by layer on one trial.
///
/// Note on the first convolution: the architecture table gives a time length
/// of 970 after the 1×32 temporal kernel, but a valid convolution of 32 taps
/// over 1000 samples yields 1000 − 32 + 1 = 969. The network uses 969 and
/// every downstream length follows from it: pool 969 → 484, conv 484 → 453,
/// pool 453 → 226.
#[test]
fn default_spec_forward_chain() {
    let spec = NetSpec::default();
    let mut rng = RandomStream::new(0, 0);
    let model = ExpandableModel::build(spec.clone(), &mut rng).unwrap();
    let x = random_tensor(&[1, 1, 58, 1000], &mut rng, 1.0);

    let expected: [&[usize]; 16] = [
        &[1, 56, 58, 969], // temporal conv
        &[1, 56, 58, 969], // bn
        &[1, 112, 1, 969], // spatial conv
        &[1, 112, 1, 969], // bn
        &[1, 112, 1, 969], // elu
        &[1, 112, 1, 484], // pool
        &[1, 112, 1, 484], // dropout
        &[1, 224, 1, 453], // temporal conv
        &[1, 224, 1, 453], // bn
        &[1, 224, 1, 453], // elu
        &[1, 224, 1, 226], // pool
        &[1, 224, 1, 226], // dropout
        &[1, 224, 1, 224], // time-wise linear
        &[1, 50176],       // flatten
        &[1, 6],           // classifier
        &[1, 6],           // softmax
    ];
    let mut h = x;
    let mut layers = model.layers().to_vec();
    for (i, (layer, want)) in layers.iter_mut().zip(expected).enumerate() {
        let (y, _) = layer_forward(layer, &h, Mode::Train, &mut rng).unwrap();
        assert_eq!(y.shape(), want, "layer {i} ({})", layer.name());
        h = y;
    }
    let total: f64 = h.data().iter().sum();
    assert!((total - 1.0).abs() < 1e-12);

    let chain = spec.shape_chain().unwrap();
    assert_eq!(chain.input, [58, 1000]);
    assert_eq!(chain.conv1, [56, 58, 969]);
    assert_eq!(chain.conv2, [112, 1, 969]);
    assert_eq!(chain.pool1, [112, 1, 484]);
    assert_eq!(chain.conv3, [224, 1, 453]);
    assert_eq!(chain.pool2, [224, 1, 226]);
    assert_eq!(chain.linear, [224, 1, 224]);
    assert_eq!(chain.features, 50176);
    assert_eq!(chain.output, 6);
}

#[test]
fn model_forward_matches_chain_for_three_classes() {
    let spec = NetSpec {
        n_classes: 3,
        ..NetSpec::default()
    };
    let mut rng = RandomStream::new(1, 0);
    let mut model = ExpandableModel::build(spec.clone(), &mut rng).unwrap();
    let x = random_tensor(&[2, 58, 1000], &mut rng, 1.0);
    let (p, cache) = model.forward(&x, Mode::Train, &mut rng).unwrap();
    assert_eq!(p.shape(), &[2, 3]);
    assert_eq!(cache.logits.shape(), &[2, 3]);
    assert_eq!(cache.features.shape(), &[2, spec.feature_dim()]);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let mut rng = RandomStream::new(0, 0);
    let spec = small_spec();
    let mut model = ExpandableModel::build(spec.clone(), &mut rng).unwrap();
    let x = random_tensor(
        &[2, spec.n_eeg_channels + 1, spec.n_timepoints],
        &mut rng,
        1.0,
    );
    assert!(model.forward(&x, Mode::Eval, &mut rng).is_err());
}

#[test]
fn short_trials_are_rejected_by_the_spec() {
    for t in [31, 40, 64] {
        let spec = NetSpec {
            n_timepoints: t,
            ..NetSpec::default()
        };
        assert!(spec.validate().is_err(), "T={t}");
    }
    let ok = NetSpec {
        n_timepoints: 128,
        kernel_time: 8,
        ..NetSpec::default()
    };
    assert_eq!(ok.shape_chain().unwrap().pool2[2], 26);
}
