//! Adam with bias correction.

use crate::model::{ExpandableModel, ParamEdit};
use crate::{Error, Result, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f64) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        OptimState {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn for_model(model: &ExpandableModel, lr: f64) -> Self {
        Self::new(model.params(), lr)
    }

    /// Mirror an expansion or pruning onto the moment tensors; appended
    /// entries start at zero.
    pub fn apply_edits(&mut self, edits: &[ParamEdit]) -> Result<()> {
        for e in edits {
            e.apply_zeros(&mut self.m[e.param])?;
            e.apply_zeros(&mut self.v[e.param])?;
        }
        Ok(())
    }

    pub fn matches(&self, params: &[&Tensor]) -> bool {
        self.m.len() == params.len()
            && self
                .m
                .iter()
                .zip(&self.v)
                .zip(params)
                .all(|((m, v), p)| m.shape() == p.shape() && v.shape() == p.shape())
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "optimizer: {} params, {} grads, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(Error::dim(format!(
                "optimizer: param {i} shape {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} for parameter {i} at flat index {j} (step {})",
                g.data()[j],
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.lr);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// [`adam_step`] over all model parameters.
pub fn optimizer_step(
    model: &mut ExpandableModel,
    grads: &[Tensor],
    state: &mut OptimState,
) -> Result<()> {
    let mut params = model.params_mut();
    adam_step(&mut params, grads, state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = Tensor::zeros(&[1]);
        let g = Tensor::filled(&[1], 1.0);
        let mut s = OptimState::new([&p], 1e-3);
        adam_step(&mut [&mut p], std::slice::from_ref(&g), &mut s).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −lr · 1/(1 + ε)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_fn(&[4], |i| i as f64);
        let before = p.clone();
        let mut s = OptimState::new([&p], 1e-2);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[4])], &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = Tensor::zeros(&[2]);
        let mut s = OptimState::new([&p], 1e-3);
        let g = Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap();
        let err = adam_step(&mut [&mut p], &[g], &mut s).unwrap_err();
        assert!(err.is_numerical());
        assert_eq!(s.step, 0);
    }
}
