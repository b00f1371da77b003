//! Adam optimiser.

use serde::{Deserialize, Serialize};

use super::model::ModelWeights;
use crate::error::{shape, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero moments shaped like `weights`, with the usual constants.
    pub fn new(weights: &ModelWeights, lr: f64) -> Self {
        Self {
            m: weights.zeros_like(),
            v: weights.zeros_like(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Updates one parameter slice in place for step `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// One Adam step over every trainable tensor.
pub fn adam_step(weights: &mut ModelWeights, grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    if grads.len() != weights.tensors.len() || state.m.len() != weights.tensors.len() {
        return Err(shape(format!(
            "{} gradient tensors and {} moment tensors for {} weights",
            grads.len(),
            state.m.len(),
            weights.tensors.len()
        )));
    }
    state.t += 1;
    for (i, t) in weights.tensors.iter_mut().enumerate() {
        if !t.trainable {
            continue;
        }
        if grads[i].len() != t.data.len() {
            return Err(shape(format!("gradient of {} has {} entries, expected {}", t.name, grads[i].len(), t.data.len())));
        }
        adam_update(
            &mut t.data,
            &grads[i],
            &mut state.m[i],
            &mut state.v[i],
            state.t,
            state.lr,
            state.beta1,
            state.beta2,
            state.eps,
        );
    }
    Ok(())
}
