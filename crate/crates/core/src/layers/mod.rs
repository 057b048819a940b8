//! Layer kernels and their analytic gradients.
//!
//! Activations are batched: convolution and batch norm take `[B, C, H, W]`,
//! pooling and the linear layer act on the last axis, softmax on rows of
//! `[B, K]`.

mod activation;
mod conv;
mod dropout;
mod linear;
mod norm;
mod pool;

pub use activation::{
    elu, elu_backward, elu_forward, softmax_backward, softmax_forward, ELU_ALPHA,
};
pub use conv::{conv2d_backward_batch, conv2d_forward, conv2d_forward_batch, conv_output_hw};
pub use dropout::{apply_mask, check_p, dropout_mask};
pub use linear::{linear_backward, linear_forward};
pub use norm::{BatchNorm, BatchNormCache, RunningStats, BN_EPS, BN_MOMENTUM};
pub use pool::{avgpool_backward, avgpool_forward, pooled_len};

use serde::{Deserialize, Serialize};

use crate::{Error, RandomStream, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Gradient of one layer: w.r.t. its input and each of its parameters, in
/// the order of [`Layer::params`].
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub d_input: Tensor,
    pub d_params: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d { weight: Tensor, bias: Tensor },
    BatchNorm(BatchNorm),
    Elu,
    AvgPool { width: usize },
    Dropout { p: f64 },
    Linear { weight: Tensor, bias: Tensor },
    Flatten,
    Softmax,
}

/// What a forward pass keeps for the paired backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Input(Tensor),
    BatchNorm(BatchNormCache),
    Shape(Vec<usize>),
    Mask(Option<Vec<f64>>),
    Output(Tensor),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Elu => "elu",
            Layer::AvgPool { .. } => "avgpool",
            Layer::Dropout { .. } => "dropout",
            Layer::Linear { .. } => "linear",
            Layer::Flatten => "flatten",
            Layer::Softmax => "softmax",
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d { weight, bias } | Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d { weight, bias } | Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            _ => vec![],
        }
    }

    /// Forward pass. Train-mode dropout draws its mask from `rng`; train-mode
    /// batch norm updates its running statistics.
    pub fn forward(
        &mut self,
        input: &Tensor,
        mode: Mode,
        rng: &mut RandomStream,
    ) -> Result<(Tensor, Cache)> {
        let out = match self {
            Layer::Conv2d { weight, bias } => (
                conv2d_forward_batch(input, weight, bias)?,
                Cache::Input(input.clone()),
            ),
            Layer::BatchNorm(bn) => {
                let (y, c) = bn.forward(input, mode)?;
                (y, Cache::BatchNorm(c))
            }
            Layer::Elu => (elu_forward(input), Cache::Input(input.clone())),
            Layer::AvgPool { width } => (
                avgpool_forward(input, *width)?,
                Cache::Shape(input.shape().to_vec()),
            ),
            Layer::Dropout { p } => match mode {
                Mode::Train => {
                    let mask = dropout_mask(input.len(), *p, rng);
                    (apply_mask(input, &mask)?, Cache::Mask(Some(mask)))
                }
                Mode::Eval => (input.clone(), Cache::Mask(None)),
            },
            Layer::Linear { weight, bias } => (
                linear_forward(input, weight, bias)?,
                Cache::Input(input.clone()),
            ),
            Layer::Flatten => {
                let b = input.dim(0);
                let rest = input.len() / b;
                (
                    input.clone().reshape(&[b, rest])?,
                    Cache::Shape(input.shape().to_vec()),
                )
            }
            Layer::Softmax => {
                let y = softmax_forward(input)?;
                (y.clone(), Cache::Output(y))
            }
        };
        out.0.check_finite(self.name())?;
        Ok(out)
    }

    pub fn backward(&self, cache: &Cache, upstream: &Tensor) -> Result<LayerGrad> {
        let mismatch = || {
            Error::Input(format!(
                "{} backward called with a cache from another layer type",
                self.name()
            ))
        };
        let grad = match (self, cache) {
            (Layer::Conv2d { weight, .. }, Cache::Input(x)) => {
                let (dx, dw, db) = conv2d_backward_batch(x, weight, upstream)?;
                LayerGrad {
                    d_input: dx,
                    d_params: vec![dw, db],
                }
            }
            (Layer::BatchNorm(bn), Cache::BatchNorm(c)) => {
                let (dx, dg, db) = bn.backward(c, upstream)?;
                LayerGrad {
                    d_input: dx,
                    d_params: vec![dg, db],
                }
            }
            (Layer::Elu, Cache::Input(x)) => LayerGrad {
                d_input: elu_backward(x, upstream)?,
                d_params: vec![],
            },
            (Layer::AvgPool { width }, Cache::Shape(s)) => LayerGrad {
                d_input: avgpool_backward(s, *width, upstream)?,
                d_params: vec![],
            },
            (Layer::Dropout { .. }, Cache::Mask(mask)) => LayerGrad {
                d_input: match mask {
                    Some(m) => apply_mask(upstream, m)?,
                    None => upstream.clone(),
                },
                d_params: vec![],
            },
            (Layer::Linear { weight, .. }, Cache::Input(x)) => {
                let (dx, dw, db) = linear_backward(x, weight, upstream)?;
                LayerGrad {
                    d_input: dx,
                    d_params: vec![dw, db],
                }
            }
            (Layer::Flatten, Cache::Shape(s)) => {
                let expected = [s[0], s[1..].iter().product()];
                upstream.expect_shape(&expected, "flatten upstream")?;
                LayerGrad {
                    d_input: upstream.clone().reshape(s)?,
                    d_params: vec![],
                }
            }
            (Layer::Softmax, Cache::Output(y)) => LayerGrad {
                d_input: softmax_backward(y, upstream)?,
                d_params: vec![],
            },
            _ => return Err(mismatch()),
        };
        grad.d_input.check_finite(self.name())?;
        Ok(grad)
    }
}

/// Free-function form of [`Layer::forward`].
pub fn layer_forward(
    layer: &mut Layer,
    input: &Tensor,
    mode: Mode,
    rng: &mut RandomStream,
) -> Result<(Tensor, Cache)> {
    layer.forward(input, mode, rng)
}

/// Free-function form of [`Layer::backward`].
pub fn layer_backward(layer: &Layer, cache: &Cache, upstream: &Tensor) -> Result<LayerGrad> {
    layer.backward(cache, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_eval_is_identity() {
        let mut l = Layer::Dropout { p: 0.5 };
        let x = Tensor::from_fn(&[2, 3, 1, 4], |i| i as f64);
        let mut rng = RandomStream::new(0, 0);
        let (y, _) = l.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_train_is_seeded() {
        let mut l = Layer::Dropout { p: 0.5 };
        let x = Tensor::filled(&[1, 4, 1, 25], 1.0);
        let (a, _) = l
            .forward(&x, Mode::Train, &mut RandomStream::new(5, 1))
            .unwrap();
        let (b, _) = l
            .forward(&x, Mode::Train, &mut RandomStream::new(5, 1))
            .unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(a.data().contains(&0.0));
    }

    #[test]
    fn upstream_shape_checked() {
        let mut l = Layer::Elu;
        let x = Tensor::zeros(&[2, 3]);
        let (_, cache) = l
            .forward(&x, Mode::Train, &mut RandomStream::new(0, 0))
            .unwrap();
        assert!(matches!(
            l.backward(&cache, &Tensor::zeros(&[3, 2])),
            Err(Error::Dimension(_))
        ));
    }
}
