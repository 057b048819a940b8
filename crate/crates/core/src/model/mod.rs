//! The expandable shallow CNN.
//!
//! Layer stack (per trial, `C` EEG channels × `T` samples):
//!
//! | # | layer | output |
//! |---|-------|--------|
//! | 0 | conv `[1, kt]`, 1 → w1 | w1 × C × (T−kt+1) |
//! | 1 | batch norm | |
//! | 2 | conv `[C, 1]`, w1 → w2 | w2 × 1 × (T−kt+1) |
//! | 3–6 | batch norm, ELU, avg-pool `[1,2]`, dropout | w2 × 1 × P1 |
//! | 7 | conv `[1, kt]`, w2 → w3 | w3 × 1 × (P1−kt+1) |
//! | 8–11 | batch norm, ELU, avg-pool `[1,2]`, dropout | w3 × 1 × P2 |
//! | 12 | linear over time, P2 → L | w3 × 1 × L |
//! | 13 | flatten | w3·L (the penultimate features) |
//! | 14–15 | linear w3·L → K, softmax | K |
//!
//! The three convolutions are expandable: their output channels are
//! tracked as filter groups in an [`ExpansionLedger`].

mod checkpoint;
mod ledger;
mod spec;
mod surgery;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ledger::{ExpansionLedger, GroupRecord, GroupStatus};
pub use spec::{NetSpec, ShapeChain, POOL_WIDTH};
pub use surgery::{EditKind, ExpandInit, ParamEdit};

use crate::layers::{BatchNorm, Cache, Layer, Mode};
use crate::{Error, RandomStream, Result, Tensor};

/// Layer-stack positions of the three expandable convolutions.
pub(crate) const CONV_LAYERS: [usize; 3] = [0, 2, 7];
/// Batch norm following each expandable convolution.
pub(crate) const BN_LAYERS: [usize; 3] = [1, 3, 8];
pub(crate) const FLATTEN: usize = 13;
pub(crate) const CLASSIFIER: usize = 14;
pub(crate) const SOFTMAX: usize = 15;

/// Positions in [`ExpandableModel::params`] of the weight tensors (the
/// tensors the L1 penalty applies to). Biases and batch-norm affine
/// parameters sit in between.
pub const WEIGHT_PARAMS: [usize; 5] = [0, 4, 8, 12, 14];
pub const N_PARAMS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandableModel {
    pub(crate) spec: NetSpec,
    pub(crate) layers: Vec<Layer>,
    pub(crate) ledger: ExpansionLedger,
}

/// Activations kept by [`ExpandableModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    caches: Vec<Cache>,
    /// Flattened penultimate features `[B, w3·L]`.
    pub features: Tensor,
    /// Pre-softmax scores `[B, K]`.
    pub logits: Tensor,
}

fn he_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut RandomStream) -> Tensor {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let mut t = Tensor::from_fn(shape, |_| std * rng.normal());
    t.quantize_f32();
    t
}

fn lecun_normal(shape: &[usize], fan_in: usize, rng: &mut RandomStream) -> Tensor {
    let std = (1.0 / fan_in as f64).sqrt();
    let mut t = Tensor::from_fn(shape, |_| std * rng.normal());
    t.quantize_f32();
    t
}

impl ExpandableModel {
    /// Build a freshly initialised network: He-normal convolutions,
    /// LeCun-normal linear layers, zero biases, unit/zero batch-norm affine.
    /// Weights are rounded to `f32`.
    pub fn build(spec: NetSpec, rng: &mut RandomStream) -> Result<Self> {
        spec.validate()?;
        let (c, kt) = (spec.n_eeg_channels, spec.kernel_time);
        let [w1, w2, w3] = spec.conv_widths;
        let p2 = spec.pooled_time();
        let lw = spec.linear_width;
        let k = spec.n_classes;

        let layers = vec![
            Layer::Conv2d {
                weight: he_normal(&[w1, 1, 1, kt], kt, 1.0, rng),
                bias: Tensor::zeros(&[w1]),
            },
            Layer::BatchNorm(BatchNorm::new(w1)),
            Layer::Conv2d {
                weight: he_normal(&[w2, w1, c, 1], w1 * c, 1.0, rng),
                bias: Tensor::zeros(&[w2]),
            },
            Layer::BatchNorm(BatchNorm::new(w2)),
            Layer::Elu,
            Layer::AvgPool { width: POOL_WIDTH },
            Layer::Dropout { p: spec.dropout_p },
            Layer::Conv2d {
                weight: he_normal(&[w3, w2, 1, kt], w2 * kt, 1.0, rng),
                bias: Tensor::zeros(&[w3]),
            },
            Layer::BatchNorm(BatchNorm::new(w3)),
            Layer::Elu,
            Layer::AvgPool { width: POOL_WIDTH },
            Layer::Dropout { p: spec.dropout_p },
            Layer::Linear {
                weight: lecun_normal(&[lw, p2], p2, rng),
                bias: Tensor::zeros(&[lw]),
            },
            Layer::Flatten,
            Layer::Linear {
                weight: lecun_normal(&[k, w3 * lw], w3 * lw, rng),
                bias: Tensor::zeros(&[k]),
            },
            Layer::Softmax,
        ];
        let ledger = ExpansionLedger::new(spec.conv_widths, 1);
        Ok(ExpandableModel {
            spec,
            layers,
            ledger,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn ledger(&self) -> &ExpansionLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut ExpansionLedger {
        &mut self.ledger
    }

    pub fn widths(&self) -> [usize; 3] {
        self.spec.conv_widths
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// All parameter tensors in layer order (16 tensors).
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn batchnorms(&self) -> [&BatchNorm; 3] {
        BN_LAYERS.map(|i| match &self.layers[i] {
            Layer::BatchNorm(bn) => bn,
            _ => unreachable!("layer {i} is batch norm"),
        })
    }

    pub(crate) fn batchnorm_mut(&mut self, l: usize) -> &mut BatchNorm {
        match &mut self.layers[BN_LAYERS[l]] {
            Layer::BatchNorm(bn) => bn,
            _ => unreachable!(),
        }
    }

    /// Sum of `|w|` over the weight tensors.
    pub fn weight_l1(&self) -> f64 {
        let params = self.params();
        WEIGHT_PARAMS.iter().map(|&i| params[i].l1()).sum()
    }

    /// Verify that parameter shapes match what the spec implies and that
    /// the ledger tiles the current widths.
    pub fn check_consistency(&self) -> Result<()> {
        let mut rng = RandomStream::new(0, 0);
        let reference = ExpandableModel::build(self.spec.clone(), &mut rng)?;
        for (i, (a, b)) in self.params().iter().zip(reference.params()).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Spec(format!(
                    "parameter {i} has shape {:?}, spec implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        for (l, bn) in self.batchnorms().iter().enumerate() {
            if let Some(r) = &bn.running {
                if r.mean.len() != self.spec.conv_widths[l] || r.var.len() != r.mean.len() {
                    return Err(Error::Spec(format!(
                        "batchnorm {} running stats size",
                        l + 1
                    )));
                }
            }
        }
        self.ledger.check_partition(self.spec.conv_widths)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        let (c, t) = (self.spec.n_eeg_channels, self.spec.n_timepoints);
        if s.len() != 3 || s[1] != c || s[2] != t {
            return Err(Error::dim(format!(
                "model expects B×{c}×{t} trials, got {s:?}"
            )));
        }
        Ok(())
    }

    /// Run the stack on `[B, C, T]` trials, returning class probabilities
    /// `[B, K]` and the cache for [`Self::backward`].
    pub fn forward(
        &mut self,
        batch: &Tensor,
        mode: Mode,
        rng: &mut RandomStream,
    ) -> Result<(Tensor, ForwardCache)> {
        self.check_batch(batch)?;
        let s = batch.shape();
        let mut x = batch.clone().reshape(&[s[0], 1, s[1], s[2]])?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut features = None;
        let mut logits = None;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if i == SOFTMAX {
                logits = Some(x.clone());
            }
            let (y, cache) = layer.forward(&x, mode, rng)?;
            caches.push(cache);
            x = y;
            if i == FLATTEN {
                features = Some(x.clone());
            }
        }
        Ok((
            x,
            ForwardCache {
                caches,
                features: features.unwrap(),
                logits: logits.unwrap(),
            },
        ))
    }

    /// Eval-mode class probabilities without keeping a cache.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        // eval mode never touches running stats or the rng
        let mut scratch = self.clone();
        let (p, _) = scratch.forward(batch, Mode::Eval, &mut RandomStream::new(0, 0))?;
        Ok(p)
    }

    /// Gradients of a scalar loss w.r.t. every parameter, given the loss
    /// gradient w.r.t. the logits. Aligned with [`Self::params`].
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Tensor) -> Result<Vec<Tensor>> {
        let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); self.layers.len()];
        let mut g = d_logits.clone();
        for i in (0..SOFTMAX).rev() {
            let grad = self.layers[i].backward(&cache.caches[i], &g)?;
            per_layer[i] = grad.d_params;
            g = grad.d_input;
        }
        Ok(per_layer.into_iter().flatten().collect())
    }

    pub(crate) fn quantize_f32(&mut self) {
        for p in self.params_mut() {
            p.quantize_f32();
        }
    }
}
