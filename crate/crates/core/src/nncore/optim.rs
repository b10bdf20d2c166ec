//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::DenoiserParams;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub hyper: AdamW,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptState {
    pub fn new(hyper: AdamW, n: usize) -> Self {
        Self { hyper, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One AdamW update. Parameters and state are untouched on error.
pub fn opt_step(params: &mut DenoiserParams, grads: &[f64], state: &mut OptState) -> Result<()> {
    let p = params.as_mut_slice();
    if grads.len() != p.len() || state.m.len() != p.len() || state.v.len() != p.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters, {} gradients, {} moments",
            p.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    let h = state.hyper;
    state.step += 1;
    let bc1 = 1.0 - h.beta1.powi(state.step as i32);
    let bc2 = 1.0 - h.beta2.powi(state.step as i32);
    for (((w, &g), m), v) in p.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
        *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *w -= h.lr * (mh / (vh.sqrt() + h.eps) + h.weight_decay * *w);
    }
    Ok(())
}
