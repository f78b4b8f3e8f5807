//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// Applies one Adam update to every parameter from its accumulated
/// gradient. Gradients are left in place; callers clear them.
pub fn adam_step(params: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: state tracks {} parameters, {} supplied",
            state.m.len(),
            params.len()
        )));
    }
    let grads: Vec<Vec<f64>> = params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.grad()
                .map(|g| g.to_vec())
                .ok_or_else(|| Error::Graph(format!("adam: parameter {i} has no gradient")))
        })
        .collect::<Result<_>>()?;
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.numel() {
            return Err(Error::Shape(format!("adam: state shape mismatch for parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter().zip(&grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        p.update_data(|data| {
            for j in 0..data.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        });
    }
    Ok(())
}
