//! Adam optimizer over flat parameter blocks.

use serde::{Deserialize, Serialize};

use crate::diffcore::param::ParameterBlock;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradient contained a NaN/Inf; parameters and state were left untouched.
    SkippedNonFinite { first_bad_index: usize },
}

/// One Adam update with bias correction. Non-finite gradients skip the step
/// and report which coordinate was bad; parameters are verified finite after
/// the update.
pub fn adam_step(
    params: &mut ParameterBlock,
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<StepOutcome> {
    if grads.len() != params.values.len() {
        return Err(Error::dim("adam gradient", params.values.len(), grads.len()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        log::warn!("adam: non-finite gradient at index {i}, skipping step");
        return Ok(StepOutcome::SkippedNonFinite { first_bad_index: i });
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..grads.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    if let Some(i) = params.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("parameter {i} after adam step")));
    }
    Ok(StepOutcome::Applied)
}
