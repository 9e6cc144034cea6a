use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

use super::TrainError;

/// Adam hyperparameters; beta/epsilon defaults follow common practice.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators mirroring the parameter shapes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn matches(&self, params: &[Tensor]) -> bool {
        self.m.len() == params.len()
            && self
                .m
                .iter()
                .zip(params)
                .all(|(m, p)| m.len() == p.numel())
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    hp: &AdamParams,
    state: &mut AdamState,
    theta: &mut [Tensor],
    grads: &[Tensor],
) -> Result<(), TrainError> {
    if !state.matches(theta) || grads.len() != theta.len() {
        return Err(TrainError::ShapeMismatch);
    }
    for (g, t) in grads.iter().zip(theta.iter()) {
        if g.numel() != t.numel() {
            return Err(TrainError::ShapeMismatch);
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient);
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (k, p) in theta.iter_mut().enumerate() {
        let g = grads[k].values();
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        let vals = p.values_mut();
        for i in 0..vals.len() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            vals[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}
