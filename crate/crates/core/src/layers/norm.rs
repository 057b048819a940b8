//! Per-channel batch normalisation over `[B, C, ...]` activations.

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::par::*;
use crate::{Error, Result, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// `None` until the first train-mode pass.
    pub running: Option<RunningStats>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub(crate) xhat: Tensor,
    pub(crate) inv_std: Vec<f64>,
    pub(crate) mode: Mode,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running: None,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn layout(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        let s = input.shape();
        if s.len() < 2 || s[1] != self.channels() {
            return Err(Error::dim(format!(
                "batchnorm over {} channels: input {s:?}",
                self.channels()
            )));
        }
        Ok((s[0], s[1], s[2..].iter().product()))
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<(Tensor, BatchNormCache)> {
        let (b, c, inner) = self.layout(input)?;
        let x = input.data();
        let count = (b * inner) as f64;

        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let stats: Vec<(f64, f64)> = (0..c)
                    .into_par_iter()
                    .map(|ch| {
                        let block = |bi: usize| &x[(bi * c + ch) * inner..][..inner];
                        let mean =
                            (0..b).map(|bi| block(bi).iter().sum::<f64>()).sum::<f64>() / count;
                        let var = (0..b)
                            .map(|bi| block(bi).iter().map(|v| (v - mean).powi(2)).sum::<f64>())
                            .sum::<f64>()
                            / count;
                        (mean, var)
                    })
                    .collect();
                let (mean, var): (Vec<f64>, Vec<f64>) = stats.into_iter().unzip();
                let running = self.running.get_or_insert_with(|| RunningStats {
                    mean: vec![0.0; c],
                    var: vec![1.0; c],
                });
                let unbias = if count > 1.0 {
                    count / (count - 1.0)
                } else {
                    1.0
                };
                for ch in 0..c {
                    running.mean[ch] =
                        (1.0 - self.momentum) * running.mean[ch] + self.momentum * mean[ch];
                    running.var[ch] =
                        (1.0 - self.momentum) * running.var[ch] + self.momentum * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => {
                let r = self.running.as_ref().ok_or(Error::UninitializedStats)?;
                (r.mean.clone(), r.var.clone())
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let gamma = self.gamma.data();
        let beta = self.beta.data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        xhat.par_chunks_mut(inner)
            .zip(out.par_chunks_mut(inner))
            .enumerate()
            .for_each(|(idx, (xh, o))| {
                let ch = idx % c;
                let src = &x[idx * inner..][..inner];
                for ((h, ov), &v) in xh.iter_mut().zip(o.iter_mut()).zip(src) {
                    *h = (v - mean[ch]) * inv_std[ch];
                    *ov = gamma[ch] * *h + beta[ch];
                }
            });
        let shape = input.shape().to_vec();
        Ok((
            Tensor::new(shape.clone(), out)?,
            BatchNormCache {
                xhat: Tensor::new(shape, xhat)?,
                inv_std,
                mode,
            },
        ))
    }

    /// Returns `(d_input, d_gamma, d_beta)`.
    pub fn backward(
        &self,
        cache: &BatchNormCache,
        upstream: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        upstream.expect_shape(cache.xhat.shape(), "batchnorm upstream")?;
        let (b, c, inner) = self.layout(upstream)?;
        let g = upstream.data();
        let xh = cache.xhat.data();
        let count = (b * inner) as f64;

        let sums: Vec<(f64, f64)> = (0..c)
            .into_par_iter()
            .map(|ch| {
                let mut sg = 0.0;
                let mut sgx = 0.0;
                for bi in 0..b {
                    let off = (bi * c + ch) * inner;
                    for (gv, hv) in g[off..off + inner].iter().zip(&xh[off..off + inner]) {
                        sg += gv;
                        sgx += gv * hv;
                    }
                }
                (sg, sgx)
            })
            .collect();

        let gamma = self.gamma.data();
        let mut d_in = vec![0.0; g.len()];
        d_in.par_chunks_mut(inner)
            .enumerate()
            .for_each(|(idx, di)| {
                let ch = idx % c;
                let off = idx * inner;
                let scale = gamma[ch] * cache.inv_std[ch];
                match cache.mode {
                    Mode::Train => {
                        let (sg, sgx) = sums[ch];
                        for ((d, gv), hv) in di
                            .iter_mut()
                            .zip(&g[off..off + inner])
                            .zip(&xh[off..off + inner])
                        {
                            *d = scale * (gv - sg / count - hv * sgx / count);
                        }
                    }
                    Mode::Eval => {
                        for (d, gv) in di.iter_mut().zip(&g[off..off + inner]) {
                            *d = scale * gv;
                        }
                    }
                }
            });
        let d_gamma: Vec<f64> = sums.iter().map(|s| s.1).collect();
        let d_beta: Vec<f64> = sums.iter().map(|s| s.0).collect();
        Ok((
            Tensor::new(upstream.shape().to_vec(), d_in)?,
            Tensor::new(vec![c], d_gamma)?,
            Tensor::new(vec![c], d_beta)?,
        ))
    }
}
