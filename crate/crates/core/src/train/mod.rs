//! In-context loss, gradients, optimizer and the training driver.

mod adam;
mod engine;
mod history;
mod run;

pub use adam::{adam_step, clip_grads, AdamState, ClipMode};
pub use history::{median_history, EvalRecord, RunHistory};
pub use run::{eval_batch, run_training, run_training_with, ProgressFn, TrainedRun, DIVERGENCE_LIMIT};

use rayon::prelude::*;

use crate::data::Prompt;
use crate::error::{contract, Result};
use crate::linalg::Mat;
use crate::transformer::{forward_unmasked, ABlock, Activation, TfParams};

use engine::{Engine, GradAcc};

/// Prompts per unit of parallel work. Partial sums are combined in chunk
/// order so results do not depend on the thread count.
const CHUNK: usize = 32;

/// Gradient of one layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub a: Option<Mat>,
    pub r: f64,
    pub b: Mat,
    pub c: Mat,
}

/// Gradient with the same structure as [`TfParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrad>,
}

impl ParamGrads {
    pub fn zeros_like(params: &TfParams) -> Self {
        let d = params.d();
        let layers = params
            .layers
            .iter()
            .map(|l| LayerGrad {
                a: l.a_matrix().map(|_| Mat::zeros(d, d)),
                r: 0.0,
                b: Mat::zeros(d, d),
                c: Mat::zeros(d, d),
            })
            .collect();
        ParamGrads { layers }
    }

    /// Same ordering as [`TfParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Some(a) = &l.a {
                out.extend_from_slice(a.as_slice());
            }
            out.push(l.r);
            out.extend_from_slice(l.b.as_slice());
            out.extend_from_slice(l.c.as_slice());
        }
        out
    }

    fn from_flat(params: &TfParams, flat: &[f64]) -> Self {
        let mut g = ParamGrads::zeros_like(params);
        let mut it = flat.iter().copied();
        for l in &mut g.layers {
            for m in [l.a.as_mut(), None].into_iter().flatten() {
                m.as_mut_slice().iter_mut().for_each(|v| *v = it.next().unwrap());
            }
            l.r = it.next().unwrap();
            l.b.as_mut_slice().iter_mut().for_each(|v| *v = it.next().unwrap());
            l.c.as_mut_slice().iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        g
    }

    /// Every gradient tensor as a mutable slice; `r` is a 1-element slice.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Some(a) = &mut l.a {
                out.push(a.as_mut_slice());
            }
            out.push(std::slice::from_mut(&mut l.r));
            out.push(l.b.as_mut_slice());
            out.push(l.c.as_mut_slice());
        }
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Some(a) = &l.a {
                out.push(a.as_slice());
            }
            out.push(std::slice::from_ref(&l.r));
            out.push(l.b.as_slice());
            out.push(l.c.as_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Largest per-tensor `‖self − reference‖ / (1e-8 + ‖reference‖)`.
    pub fn max_relative_error(&self, reference: &ParamGrads) -> f64 {
        self.tensors()
            .into_iter()
            .zip(reference.tensors())
            .map(|(a, b)| {
                let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                let norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                diff / (1e-8 + norm)
            })
            .fold(0.0, f64::max)
    }
}

fn check_batch(params: &TfParams, batch: &[Prompt]) -> Result<()> {
    params.validate()?;
    if batch.is_empty() {
        return Err(contract("loss needs a nonempty batch"));
    }
    let d = params.d();
    if let Some(p) = batch.iter().find(|p| p.d() != d) {
        return Err(contract(format!("prompt dimension {} but model dimension {d}", p.d())));
    }
    Ok(())
}

/// Mean over the batch of `([Z_{k+1}]_{d+1,n+1} + y⁽ⁿ⁺¹⁾)²`.
pub fn icl_loss(params: &TfParams, act: Activation, batch: &[Prompt]) -> Result<f64> {
    check_batch(params, batch)?;
    let sums = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut engine = Engine::new(params, act);
            let mut sum = 0.0;
            for p in chunk {
                let z = engine.forward(p)?;
                sum += (z + p.query_label()).powi(2);
            }
            Ok(sum)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / batch.len() as f64)
}

/// The loss as `tr((I−M) Ȳᵀ Ȳ (I−M))` over the trajectory that keeps the
/// query label in the input.
pub fn loss_trace_form(params: &TfParams, act: Activation, batch: &[Prompt]) -> Result<f64> {
    check_batch(params, batch)?;
    let sums = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sum = 0.0;
            for p in chunk {
                let traj = forward_unmasked(params, act, &p.x, &p.y)?;
                let y_bar = traj.y(params.num_layers());
                // Diagonal of I − M: 1 on the query column only.
                let n = y_bar.len() - 1;
                let keep = |j: usize| if j == n { 1.0 } else { 0.0 };
                sum += y_bar.iter().enumerate().map(|(j, v)| keep(j) * v * v * keep(j)).sum::<f64>();
            }
            Ok(sum)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / batch.len() as f64)
}

/// Loss and its exact gradient by reverse accumulation.
pub fn loss_and_grad(params: &TfParams, act: Activation, batch: &[Prompt]) -> Result<(f64, ParamGrads)> {
    check_batch(params, batch)?;
    let parts = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut engine = Engine::new(params, act);
            let mut acc = GradAcc::new(params);
            let mut sum = 0.0;
            for p in chunk {
                let residual = engine.forward(p)? + p.query_label();
                sum += residual * residual;
                engine.backward(2.0 * residual, &mut acc);
            }
            Ok((sum, acc))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = GradAcc::new(params);
    let mut loss = 0.0;
    for (sum, g) in &parts {
        loss += sum;
        total.add(g);
    }
    let inv = 1.0 / batch.len() as f64;
    Ok((loss * inv, total.into_param_grads(params, inv)))
}

pub fn grad_analytic(params: &TfParams, act: Activation, batch: &[Prompt]) -> Result<ParamGrads> {
    Ok(loss_and_grad(params, act, batch)?.1)
}

/// Default central-difference step for a coordinate with value `p`.
pub fn default_fd_step(p: f64) -> f64 {
    1e-5 * (1.0 + p.abs())
}

/// Central differences of [`icl_loss`], one coordinate at a time. With
/// `h = None` each coordinate uses [`default_fd_step`]; otherwise the given
/// step scaled by `1 + |p|`.
pub fn grad_fd(params: &TfParams, act: Activation, batch: &[Prompt], h: Option<f64>) -> Result<ParamGrads> {
    check_batch(params, batch)?;
    if h.is_some_and(|h| !(h > 0.0)) {
        return Err(contract("finite-difference step must be positive"));
    }
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let step = h.map_or_else(|| default_fd_step(base[i]), |h| h * (1.0 + base[i].abs()));
        flat[i] = base[i] + step;
        probe.set_flat(&flat);
        let plus = icl_loss(&probe, act, batch)?;
        flat[i] = base[i] - step;
        probe.set_flat(&flat);
        let minus = icl_loss(&probe, act, batch)?;
        flat[i] = base[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(ParamGrads::from_flat(params, &out))
}

/// `‖M − αI‖_F / ‖M‖_F` at the minimizing `α = tr(M)/d`.
pub fn dist_to_identity(m: &Mat) -> Result<f64> {
    if !m.is_square() {
        return Err(contract(format!("distance to identity needs a square matrix, got {:?}", m.shape())));
    }
    let norm = m.frobenius();
    if norm == 0.0 {
        return Err(contract("distance to identity is undefined for the zero matrix"));
    }
    let alpha = m.trace() / m.rows() as f64;
    Ok(m.sub(&Mat::identity(m.rows()).scale(alpha))?.frobenius() / norm)
}

/// `Σ^{1/2} BᵀC Σ^{1/2}` for every layer.
pub fn preconditioned_bc(params: &TfParams, sigma_sqrt: &Mat) -> Result<Vec<Mat>> {
    params
        .layers
        .iter()
        .map(|l| sigma_sqrt.matmul(&l.bt_c())?.matmul(sigma_sqrt))
        .collect()
}

/// Per-layer `Dist(Σ^{1/2}BᵀCΣ^{1/2}, I)` and, for full-A layers, `Dist(A, I)`.
pub fn layer_dists(params: &TfParams, sigma_sqrt: &Mat) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let bc = preconditioned_bc(params, sigma_sqrt)?.iter().map(dist_to_identity).collect::<Result<Vec<_>>>()?;
    let a = if params.layers.iter().all(|l| matches!(l.a, ABlock::Full(_))) {
        Some(params.layers.iter().map(|l| dist_to_identity(l.a_matrix().unwrap())).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    Ok((bc, a))
}
