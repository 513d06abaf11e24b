use crate::error::{contract, Result};
use crate::transformer::TfParams;

use super::ParamGrads;

/// How gradients are limited before the moment update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipMode {
    /// Rescale each tensor to Frobenius norm at most `clip`.
    Frobenius,
    /// Clamp each entry to `[−clip, clip]`.
    Elementwise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &TfParams, lr: f64) -> Self {
        let len = params.to_flat().len();
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Clips `grads` in place.
pub fn clip_grads(grads: &mut ParamGrads, clip: f64, mode: ClipMode) {
    for t in grads.tensors_mut() {
        match mode {
            ClipMode::Frobenius => {
                let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    t.iter_mut().for_each(|v| *v *= s);
                }
            }
            ClipMode::Elementwise => t.iter_mut().for_each(|v| *v = v.clamp(-clip, clip)),
        }
    }
}

/// Clips the gradient, then applies one bias-corrected ADAM update to `params`.
pub fn adam_step(state: &mut AdamState, params: &mut TfParams, grads: &ParamGrads, clip: f64, mode: ClipMode) -> Result<()> {
    if !(clip > 0.0) {
        return Err(contract("clip threshold must be positive"));
    }
    let mut clipped = grads.clone();
    clip_grads(&mut clipped, clip, mode);
    let g = clipped.to_flat();
    let mut p = params.to_flat();
    if g.len() != p.len() || state.first_moment.len() != p.len() {
        return Err(contract("gradient, optimizer state and parameters differ in structure"));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..p.len() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g[i];
        *v = state.beta2 * *v + (1.0 - state.beta2) * g[i] * g[i];
        p[i] -= state.lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
    }
    params.set_flat(&p);
    Ok(())
}
