//! Training objectives.
//!
//! * sparse stage: `CE + λ Σ_j Σ |W^j|`
//! * after expansion: `CE + δ Σ |W| + δ_g Σ_e ‖W^e‖₂`, the group sum running
//!   over the filter groups added by expansion.
//!
//! `W` ranges over convolution and linear weights; biases and batch-norm
//! affine parameters are not penalised. Penalty gradients are subgradients
//! that vanish at exact zeros.

use serde::{Deserialize, Serialize};

use crate::model::{ExpandableModel, WEIGHT_PARAMS};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub delta: f64,
    pub delta_g: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1e-4,
            delta: 1e-4,
            delta_g: 1e-3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("delta", self.delta),
            ("delta_g", self.delta_g),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Input(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Which penalty accompanies the cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Elementwise L1 with coefficient λ.
    Sparse { lambda: f64 },
    /// Elementwise L1 with δ plus group LASSO with δ_g over added groups.
    GroupSparse { delta: f64, delta_g: f64 },
}

impl Objective {
    pub fn sparse(cfg: &LossConfig) -> Self {
        Objective::Sparse { lambda: cfg.lambda }
    }

    pub fn group_sparse(cfg: &LossConfig) -> Self {
        Objective::GroupSparse {
            delta: cfg.delta,
            delta_g: cfg.delta_g,
        }
    }

    fn l1_coefficient(&self) -> f64 {
        match *self {
            Objective::Sparse { lambda } => lambda,
            Objective::GroupSparse { delta, .. } => delta,
        }
    }

    fn group_coefficient(&self) -> f64 {
        match *self {
            Objective::Sparse { .. } => 0.0,
            Objective::GroupSparse { delta_g, .. } => delta_g,
        }
    }
}

/// One-hot `[B, K]` encoding.
pub fn one_hot(labels: &[u32], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len().max(1), k]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * k + l as usize] = 1.0;
    }
    t
}

fn check_targets(probs: &Tensor, labels: &Tensor) -> Result<()> {
    if probs.ndim() != 2 || probs.shape() != labels.shape() {
        return Err(Error::dim(format!(
            "probabilities {:?} and labels {:?} must both be B×K",
            probs.shape(),
            labels.shape()
        )));
    }
    let k = probs.dim(1);
    for (i, row) in labels.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::Input(format!(
                "label row {i} is not one-hot: {row:?}"
            )));
        }
    }
    Ok(())
}

/// Mean cross-entropy of one-hot targets under `probs`.
pub fn cross_entropy(probs: &Tensor, labels: &Tensor) -> Result<f64> {
    check_targets(probs, labels)?;
    let n = probs.dim(0) as f64;
    let total: f64 = probs
        .data()
        .iter()
        .zip(labels.data())
        .filter(|(_, &y)| y == 1.0)
        .map(|(&p, _)| -p.max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / n)
}

/// Gradient of the mean cross-entropy w.r.t. the softmax logits.
pub fn cross_entropy_logit_grad(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    check_targets(probs, labels)?;
    let n = probs.dim(0) as f64;
    let data = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(p, y)| (p - y) / n)
        .collect();
    Tensor::new(probs.shape().to_vec(), data)
}

/// Sum of the norms of all live added filter groups.
pub fn group_lasso_sum(model: &ExpandableModel) -> f64 {
    model
        .added_group_slices()
        .iter()
        .map(|(_, s)| model.slices_norm(s))
        .sum()
}

/// Euclidean norm of one filter group (incoming filters and fan-out slice).
pub fn group_norm(model: &ExpandableModel, group_id: u32) -> Result<f64> {
    model.group_norm(group_id)
}

pub fn penalty(model: &ExpandableModel, objective: &Objective) -> f64 {
    let l1 = objective.l1_coefficient() * model.weight_l1();
    let g = objective.group_coefficient();
    if g == 0.0 {
        l1
    } else {
        l1 + g * group_lasso_sum(model)
    }
}

pub fn loss_eq1(
    probs: &Tensor,
    labels: &Tensor,
    model: &ExpandableModel,
    lambda: f64,
) -> Result<f64> {
    let obj = Objective::Sparse { lambda };
    Ok(cross_entropy(probs, labels)? + penalty(model, &obj))
}

pub fn loss_eq2(
    probs: &Tensor,
    labels: &Tensor,
    model: &ExpandableModel,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(cross_entropy(probs, labels)? + penalty(model, &Objective::group_sparse(cfg)))
}

/// Add the penalty subgradient to `grads` (aligned with `model.params()`).
pub fn add_penalty_grad(model: &ExpandableModel, objective: &Objective, grads: &mut [Tensor]) {
    let params = model.params();
    let c = objective.l1_coefficient();
    if c != 0.0 {
        for &i in &WEIGHT_PARAMS {
            for (g, &w) in grads[i].data_mut().iter_mut().zip(params[i].data()) {
                if w > 0.0 {
                    *g += c;
                } else if w < 0.0 {
                    *g -= c;
                }
            }
        }
    }
    let dg = objective.group_coefficient();
    if dg != 0.0 {
        for (_, slices) in model.added_group_slices() {
            let norm = model.slices_norm(&slices);
            if norm == 0.0 {
                continue;
            }
            let scale = dg / norm;
            for (p, axis, range) in slices {
                let w = params[p].gather_along(axis, range.clone());
                let mut k = 0;
                grads[p].for_each_along_mut(axis, range, |g| {
                    *g += scale * w[k];
                    k += 1;
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_prediction_costs_ln_k() {
        let p = Tensor::filled(&[3, 6], 1.0 / 6.0);
        let y = one_hot(&[0, 3, 5], 6);
        assert!((cross_entropy(&p, &y).unwrap() - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let y = one_hot(&[1, 0], 3);
        assert_eq!(cross_entropy(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn rejects_soft_labels() {
        let p = Tensor::filled(&[1, 2], 0.5);
        let y = Tensor::filled(&[1, 2], 0.5);
        assert!(matches!(cross_entropy(&p, &y), Err(Error::Input(_))));
    }
}
