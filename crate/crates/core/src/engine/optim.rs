//! Hand-written first-order optimizers and the EWC-style penalty step.

use serde::{Deserialize, Serialize};

use crate::classifier::GradStats;
use crate::ndcore::FlatVector;
use crate::{Error, Result};

/// `θ − lr · g`.
pub fn sgd_step(theta: &FlatVector, grad: &FlatVector, lr: f64) -> Result<FlatVector> {
    theta.check_len(grad, "sgd_step")?;
    Ok(theta.iter().zip(grad.iter()).map(|(t, g)| t - lr * g).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: FlatVector,
    pub v: FlatVector,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: FlatVector::zeros(len),
            v: FlatVector::zeros(len),
            t: 0,
            config,
        }
    }
}

/// One bias-corrected Adam step. Returns the new parameters and state.
pub fn adam_step(theta: &FlatVector, grad: &FlatVector, state: &AdamState) -> Result<(FlatVector, AdamState)> {
    let mut next = state.clone();
    let out = adam_step_in_place(theta, grad, &mut next)?;
    Ok((out, next))
}

pub(crate) fn adam_step_in_place(theta: &FlatVector, grad: &FlatVector, state: &mut AdamState) -> Result<FlatVector> {
    theta.check_len(grad, "adam_step")?;
    theta.check_len(&state.m, "adam_step(state)")?;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let mut out = Vec::with_capacity(theta.len());
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        out.push(theta[i] - lr * m_hat / (v_hat.sqrt() + eps));
    }
    Ok(FlatVector::new(out))
}

/// SGD on `g + λ · F ⊙ (θ − θ*)`.
pub fn ewc_baseline_step(
    theta: &FlatVector,
    grad_current: &FlatVector,
    fisher: &GradStats,
    theta_star: &FlatVector,
    lr: f64,
    lambda: f64,
) -> Result<FlatVector> {
    theta.check_len(grad_current, "ewc_baseline_step(grad)")?;
    theta.check_len(&fisher.avg_sq_grad, "ewc_baseline_step(fisher)")?;
    theta.check_len(theta_star, "ewc_baseline_step(theta_star)")?;
    if !(lambda >= 0.0) {
        return Err(Error::arg(format!("EWC lambda must be >= 0, got {lambda}")));
    }
    Ok((0..theta.len())
        .map(|i| {
            let penalty = lambda * fisher.avg_sq_grad[i] * (theta[i] - theta_star[i]);
            theta[i] - lr * (grad_current[i] + penalty)
        })
        .collect())
}
