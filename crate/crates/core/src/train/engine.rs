//! Per-prompt forward/backward pass specialized to the in-context loss.
//!
//! Scores are `S = Xᵀ W X` with `W = BᵀC`. The backward pass accumulates
//! `∂L/∂W` per layer and converts to `∂L/∂B = C (∂L/∂W)ᵀ`, `∂L/∂C = B ∂L/∂W`
//! once per batch. Only the first `n` rows of `ĥ` are formed, and the top
//! layer computes only the query column. Buffers are flat, row-major and
//! reused across prompts.

use crate::data::Prompt;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::transformer::{Activation, TfParams, EXP_GUARD};

use super::ParamGrads;

#[derive(Default)]
struct LayerCache {
    /// Input covariates `X_ℓ` (d × N); only kept when `X` moves.
    x: Vec<f64>,
    /// Input labels `Y_ℓ` (N).
    y: Vec<f64>,
    /// `W X_ℓ` (d × N).
    p: Vec<f64>,
    /// Scores and activations for rows `0..n` (n × N), columns `first_col..N`.
    s: Vec<f64>,
    h: Vec<f64>,
    /// `Y M ĥ` (N) and `X M ĥ` (d × N, full-A layers below the top only).
    yg: Vec<f64>,
    xg: Vec<f64>,
    first_col: usize,
}

/// Raw gradient sums in the engine's native parameterization.
pub(crate) struct GradAcc {
    dw: Vec<Vec<f64>>,
    da: Vec<Option<Vec<f64>>>,
    dr: Vec<f64>,
}

impl GradAcc {
    pub fn new(params: &TfParams) -> Self {
        let dd = params.d() * params.d();
        GradAcc {
            dw: params.layers.iter().map(|_| vec![0.0; dd]).collect(),
            da: params.layers.iter().map(|l| l.a_matrix().map(|_| vec![0.0; dd])).collect(),
            dr: vec![0.0; params.layers.len()],
        }
    }

    pub fn add(&mut self, other: &GradAcc) {
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            add(a, b);
        }
        for (a, b) in self.da.iter_mut().zip(&other.da) {
            if let (Some(a), Some(b)) = (a, b) {
                add(a, b);
            }
        }
        add(&mut self.dr, &other.dr);
    }

    /// Gradient with respect to `(A, r, B, C)`, scaled by `scale`.
    pub fn into_param_grads(self, params: &TfParams, scale: f64) -> ParamGrads {
        let d = params.d();
        let mut out = ParamGrads::zeros_like(params);
        for (li, (g, layer)) in out.layers.iter_mut().zip(&params.layers).enumerate() {
            let dw = Mat::from_vec(d, d, self.dw[li].iter().map(|v| v * scale).collect()).unwrap();
            g.b = layer.c.matmul(&dw.transpose()).unwrap();
            g.c = layer.b.matmul(&dw).unwrap();
            g.r = self.dr[li] * scale;
            if let (Some(ga), Some(da)) = (g.a.as_mut(), &self.da[li]) {
                ga.as_mut_slice().iter_mut().zip(da).for_each(|(o, v)| *o = v * scale);
            }
        }
        out
    }
}

pub(crate) struct Engine<'a> {
    params: &'a TfParams,
    act: Activation,
    d: usize,
    cols: usize,
    w: Vec<Vec<f64>>,
    x0: Vec<f64>,
    caches: Vec<LayerCache>,
    /// Gradients must flow through `X` when any layer moves the covariates.
    track_x: bool,
    // Backward scratch.
    dy: Vec<f64>,
    dy_in: Vec<f64>,
    dx: Vec<f64>,
    dx_in: Vec<f64>,
    dh: Vec<f64>,
    t: Vec<f64>,
    dxg: Vec<f64>,
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn reset(v: &mut Vec<f64>, len: usize) {
    v.clear();
    v.resize(len, 0.0);
}

/// Sizes `v` without clearing; callers overwrite every entry they read.
fn ensure_len(v: &mut Vec<f64>, len: usize) {
    if v.len() != len {
        v.resize(len, 0.0);
    }
}

/// `out = Σ_a coef(a) · rows[a]`, overwriting `out`.
#[inline]
fn combine(out: &mut [f64], d: usize, coef: impl Fn(usize) -> f64, row: impl Fn(usize) -> usize, src: &[f64]) {
    let len = out.len();
    let c = coef(0);
    let r0 = row(0);
    for (o, v) in out.iter_mut().zip(&src[r0..r0 + len]) {
        *o = c * v;
    }
    for a in 1..d {
        let r = row(a);
        axpy(coef(a), &src[r..r + len], out);
    }
}

impl<'a> Engine<'a> {
    pub fn new(params: &'a TfParams, act: Activation) -> Self {
        Engine {
            params,
            act,
            d: params.d(),
            cols: 0,
            w: params.layers.iter().map(|l| l.bt_c().into_vec()).collect(),
            x0: Vec::new(),
            caches: params.layers.iter().map(|_| LayerCache::default()).collect(),
            track_x: params.has_full_a(),
            dy: Vec::new(),
            dy_in: Vec::new(),
            dx: Vec::new(),
            dx_in: Vec::new(),
            dh: Vec::new(),
            t: Vec::new(),
            dxg: Vec::new(),
        }
    }

    /// Runs the layers on the masked prompt and returns `[Z_{k+1}]_{d+1,n+1}`.
    pub fn forward(&mut self, prompt: &Prompt) -> Result<f64> {
        let d = self.d;
        let cols = prompt.x.cols();
        let n = cols - 1;
        if prompt.d() != d {
            return Err(Error::Contract(format!("prompt dimension {} but model dimension {d}", prompt.d())));
        }
        self.cols = cols;
        self.x0.clear();
        self.x0.extend_from_slice(prompt.x.as_slice());
        let last = self.params.layers.len() - 1;

        let mut y = prompt.z0.row(d).to_vec();
        let mut x_moving = if self.track_x { Some(self.x0.clone()) } else { None };

        for (li, layer) in self.params.layers.iter().enumerate() {
            let c0 = if li == last { n } else { 0 };
            let cache = &mut self.caches[li];
            cache.first_col = c0;
            let x: &[f64] = x_moving.as_deref().unwrap_or(&self.x0);
            let w = &self.w[li];

            // P = W X
            ensure_len(&mut cache.p, d * cols);
            for a in 0..d {
                combine(&mut cache.p[a * cols..(a + 1) * cols], d, |b| w[a * d + b], |b| b * cols, x);
            }
            // S[i][j] = Σ_a X[a][i] P[a][j]
            ensure_len(&mut cache.s, n * cols);
            for i in 0..n {
                let srow = &mut cache.s[i * cols + c0..(i + 1) * cols];
                combine(srow, d, |a| x[a * cols + i], |a| a * cols + c0, &cache.p);
            }
            activate(self.act, &cache.s, &mut cache.h, n, cols, c0)?;

            reset(&mut cache.yg, cols);
            for i in 0..n {
                axpy(y[i], &cache.h[i * cols + c0..(i + 1) * cols], &mut cache.yg[c0..]);
            }

            cache.y.clear();
            cache.y.extend_from_slice(&y);
            for j in c0..cols {
                y[j] += layer.r * cache.yg[j];
            }

            if let Some(xm) = x_moving.as_mut() {
                cache.x.clear();
                cache.x.extend_from_slice(xm);
                cache.xg.clear();
                if let (Some(a), false) = (layer.a_matrix(), li == last) {
                    reset(&mut cache.xg, d * cols);
                    for k in 0..d {
                        let out = &mut cache.xg[k * cols..(k + 1) * cols];
                        for i in 0..n {
                            axpy(cache.x[k * cols + i], &cache.h[i * cols..(i + 1) * cols], out);
                        }
                    }
                    for k in 0..d {
                        let dst = &mut xm[k * cols..(k + 1) * cols];
                        for m in 0..d {
                            axpy(a[(k, m)], &cache.xg[m * cols..(m + 1) * cols], dst);
                        }
                    }
                }
            }
        }
        Ok(y[n])
    }

    /// Accumulates `seed · ∂[Z_{k+1}]_{d+1,n+1}/∂θ` into `acc`. Must follow
    /// [`Engine::forward`] on the same prompt.
    pub fn backward(&mut self, seed: f64, acc: &mut GradAcc) {
        let d = self.d;
        let cols = self.cols;
        let n = cols - 1;

        reset(&mut self.dy, cols);
        self.dy[n] = seed;
        if self.track_x {
            reset(&mut self.dx, d * cols);
        }

        for li in (0..self.params.layers.len()).rev() {
            let layer = &self.params.layers[li];
            let cache = &self.caches[li];
            let c0 = cache.first_col;
            let h = &cache.h;
            let x: &[f64] = if self.track_x { &cache.x } else { &self.x0 };
            let dy = &self.dy;

            // Y' = Y + r · Y M h
            acc.dr[li] += dotp(&dy[c0..], &cache.yg[c0..]);
            self.dy_in.clear();
            self.dy_in.extend_from_slice(dy);
            ensure_len(&mut self.dh, n * cols);
            for i in 0..n {
                let hrow = &h[i * cols + c0..(i + 1) * cols];
                self.dy_in[i] += layer.r * dotp(hrow, &dy[c0..]);
                let ry = layer.r * cache.y[i];
                for (o, v) in self.dh[i * cols + c0..(i + 1) * cols].iter_mut().zip(&dy[c0..]) {
                    *o = ry * v;
                }
            }

            // X' = X + A · X M h
            if self.track_x {
                self.dx_in.clear();
                self.dx_in.extend_from_slice(&self.dx);
            }
            if let (Some(a), Some(da)) = (layer.a_matrix(), acc.da[li].as_mut()) {
                if !cache.xg.is_empty() {
                    reset(&mut self.dxg, d * cols);
                    for k in 0..d {
                        for m in 0..d {
                            let (src, dst) = (&self.dx[k * cols..(k + 1) * cols], &mut self.dxg[m * cols..(m + 1) * cols]);
                            axpy(a[(k, m)], src, dst);
                        }
                    }
                    for k in 0..d {
                        for m in 0..d {
                            da[k * d + m] += dotp(&self.dx[k * cols..(k + 1) * cols], &cache.xg[m * cols..(m + 1) * cols]);
                        }
                    }
                    for i in 0..n {
                        let hrow = &h[i * cols..(i + 1) * cols];
                        for k in 0..d {
                            let dxgk = &self.dxg[k * cols..(k + 1) * cols];
                            self.dx_in[k * cols + i] += dotp(dxgk, hrow);
                            axpy(x[k * cols + i], dxgk, &mut self.dh[i * cols..(i + 1) * cols]);
                        }
                    }
                }
            }

            activate_backward(self.act, &cache.s, h, &mut self.dh, n, cols, c0);
            let ds = &self.dh;

            // S = Xᵀ W X: T = X dS, dW += T Xᵀ.
            reset(&mut self.t, d * cols);
            for a in 0..d {
                let trow = &mut self.t[a * cols + c0..(a + 1) * cols];
                combine(trow, n, |i| x[a * cols + i], |i| i * cols + c0, ds);
            }
            let dw = &mut acc.dw[li];
            for a in 0..d {
                let trow = &self.t[a * cols + c0..(a + 1) * cols];
                for b in 0..d {
                    dw[a * d + b] += dotp(trow, &x[b * cols + c0..(b + 1) * cols]);
                }
            }
            if self.track_x {
                // dX[:, i] += Σ_j dS[i][j] P[:, j] for i < n, and dX += Wᵀ T.
                let w = &self.w[li];
                for a in 0..d {
                    let prow = &cache.p[a * cols + c0..(a + 1) * cols];
                    for i in 0..n {
                        self.dx_in[a * cols + i] += dotp(&ds[i * cols + c0..(i + 1) * cols], prow);
                    }
                }
                for b in 0..d {
                    let dst = &mut self.dx_in[b * cols..(b + 1) * cols];
                    for a in 0..d {
                        axpy(w[a * d + b], &self.t[a * cols..(a + 1) * cols], dst);
                    }
                }
                std::mem::swap(&mut self.dx, &mut self.dx_in);
            }
            std::mem::swap(&mut self.dy, &mut self.dy_in);
        }
    }
}

fn activate(act: Activation, s: &[f64], h: &mut Vec<f64>, n: usize, cols: usize, c0: usize) -> Result<()> {
    ensure_len(h, n * cols);
    match act {
        Activation::LinearDot => {
            for i in 0..n {
                h[i * cols + c0..(i + 1) * cols].copy_from_slice(&s[i * cols + c0..(i + 1) * cols]);
            }
        }
        Activation::ReluDot => {
            for i in 0..n {
                let row = i * cols + c0..(i + 1) * cols;
                for (o, &v) in h[row.clone()].iter_mut().zip(&s[row]) {
                    *o = v.max(0.0);
                }
            }
        }
        Activation::ExpDot => {
            for i in 0..n {
                for j in c0..cols {
                    let v = s[i * cols + j];
                    if v > EXP_GUARD {
                        return Err(Error::Overflow { argument: v });
                    }
                    h[i * cols + j] = v.exp();
                }
            }
        }
        Activation::MaskedSoftmax => {
            let width = cols - c0;
            let mut max = vec![f64::NEG_INFINITY; width];
            for i in 0..n {
                for (m, &v) in max.iter_mut().zip(&s[i * cols + c0..(i + 1) * cols]) {
                    *m = m.max(v);
                }
            }
            let mut total = vec![0.0; width];
            for i in 0..n {
                let row = i * cols + c0..(i + 1) * cols;
                for ((o, &v), (t, m)) in h[row.clone()].iter_mut().zip(&s[row]).zip(total.iter_mut().zip(&max)) {
                    *o = (v - m).exp();
                    *t += *o;
                }
            }
            for t in &mut total {
                *t = 1.0 / *t;
            }
            for i in 0..n {
                for (o, t) in h[i * cols + c0..(i + 1) * cols].iter_mut().zip(&total) {
                    *o *= t;
                }
            }
        }
    }
    Ok(())
}

/// Replaces `dh` (gradient with respect to `ĥ`) by the gradient with respect
/// to the scores.
fn activate_backward(act: Activation, s: &[f64], h: &[f64], dh: &mut [f64], n: usize, cols: usize, c0: usize) {
    match act {
        Activation::LinearDot => {}
        Activation::ReluDot => {
            // Subgradient 0 at the kink.
            for i in 0..n {
                let row = i * cols + c0..(i + 1) * cols;
                for (dv, &sv) in dh[row.clone()].iter_mut().zip(&s[row]) {
                    *dv = if sv > 0.0 { *dv } else { 0.0 };
                }
            }
        }
        Activation::ExpDot => {
            for i in 0..n {
                for j in c0..cols {
                    dh[i * cols + j] *= h[i * cols + j];
                }
            }
        }
        Activation::MaskedSoftmax => {
            let mut dot = vec![0.0; cols - c0];
            for i in 0..n {
                let row = i * cols + c0..(i + 1) * cols;
                for (acc, (hv, dv)) in dot.iter_mut().zip(h[row.clone()].iter().zip(&dh[row])) {
                    *acc += hv * dv;
                }
            }
            for i in 0..n {
                let row = i * cols + c0..(i + 1) * cols;
                for ((dv, hv), acc) in dh[row.clone()].iter_mut().zip(&h[row]).zip(&dot) {
                    *dv = hv * (*dv - acc);
                }
            }
        }
    }
}
