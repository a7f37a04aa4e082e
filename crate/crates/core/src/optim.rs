//! AdamW with decoupled weight decay, a cosine learning-rate schedule and
//! global-norm gradient clipping.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, first_moment: Vec::new(), second_moment: Vec::new() }
    }
}

/// One AdamW update over a list of parameter tensors.
///
/// `decay[k]` says whether tensor `k` receives weight decay. Moments are
/// allocated on the first call and must keep their shapes afterwards.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    decay: &[bool],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != decay.len() {
        return Err(Error::shape(format!(
            "{} parameter tensors, {} gradients, {} decay flags",
            params.len(),
            grads.len(),
            decay.len()
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::shape(format!("tensor {k}: {} parameters, {} gradients", p.len(), g.len())));
        }
    }
    let next_step = state.step + 1;
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Training { step: next_step, component: "gradient".into() });
    }
    if state.first_moment.is_empty() {
        state.first_moment = params.iter().map(|p| alloc::vec![0.0; p.len()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    if state.first_moment.len() != params.len()
        || state.first_moment.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
    {
        return Err(Error::shape("optimizer moments do not match the parameter list"));
    }

    state.step = next_step;
    let AdamWConfig { beta1, beta2, eps, weight_decay } = state.config;
    let bc1 = 1.0 - libm::pow(beta1, next_step as f64);
    let bc2 = 1.0 - libm::pow(beta2, next_step as f64);
    for k in 0..params.len() {
        let shrink = if decay[k] { 1.0 - lr * weight_decay } else { 1.0 };
        let (m, v) = (&mut state.first_moment[k], &mut state.second_moment[k]);
        for (((p, &g), mi), vi) in params[k].iter_mut().zip(grads[k]).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p = *p * shrink - lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("cosine schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(Error::contract(format!("step {step} beyond schedule length {total_steps}")));
    }
    let phase = core::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + libm::cos(phase)))
}

/// Scales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = libm::sqrt(total);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
