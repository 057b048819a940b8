//! Inverted dropout: kept units are scaled by `1/(1-p)` at train time, so
//! eval mode is the identity.

use crate::{Error, RandomStream, Result, Tensor};

pub fn check_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Spec(format!(
            "dropout probability {p} not in [0, 1)"
        )));
    }
    Ok(())
}

/// Draw a mask of `n` multipliers, each `0` with probability `p` and
/// `1/(1-p)` otherwise.
pub fn dropout_mask(n: usize, p: f64, rng: &mut RandomStream) -> Vec<f64> {
    if p == 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect()
}

pub fn apply_mask(input: &Tensor, mask: &[f64]) -> Result<Tensor> {
    if mask.len() != input.len() {
        return Err(Error::dim(format!(
            "dropout mask of {} values for input {:?}",
            mask.len(),
            input.shape()
        )));
    }
    let data = input.data().iter().zip(mask).map(|(x, m)| x * m).collect();
    Tensor::new(input.shape().to_vec(), data)
}
