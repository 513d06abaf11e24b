//! Reference computations that never touch the transformer: functional
//! gradient descent in representer form, parameter-space linear regression
//! GD, and the conditional-Gaussian (Bayes) predictor. Also the weight
//! construction under which the transformer reproduces functional GD.

use rayon::prelude::*;

use crate::data::Prompt;
use crate::error::{contract, Error, Result};
use crate::kernels::{kernel_eval, kernel_matrix, KernelSpec};
use crate::linalg::{dot, sym_eig, Mat};
use crate::transformer::{forward, ABlock, Activation, LayerParams, TfParams};

/// `f(·) = Σᵢ αᵢ K(·, xᵢ)` over fixed anchor points.
#[derive(Clone, Debug)]
pub struct FgdState {
    pub alpha: Vec<f64>,
    pub kernel: KernelSpec,
    /// Demonstration covariates, `d × n`.
    pub anchors: Mat,
}

impl FgdState {
    pub fn zero(kernel: KernelSpec, anchors: Mat) -> Self {
        FgdState { alpha: vec![0.0; anchors.cols()], kernel, anchors }
    }

    pub fn eval(&self, query: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (i, &a) in self.alpha.iter().enumerate() {
            if a != 0.0 {
                acc += a * kernel_eval(self.kernel, query, &self.anchors.col(i))?;
            }
        }
        Ok(acc)
    }

    /// One step `f ← f + rate · Σᵢ (yᵢ − f(xᵢ)) K(·, xᵢ)`.
    pub fn step(&mut self, gram: &Mat, labels: &[f64], rate: f64) {
        let fitted = gram.matvec(&self.alpha).expect("gram matches anchors");
        for ((a, y), f) in self.alpha.iter_mut().zip(labels).zip(fitted) {
            *a += rate * (y - f);
        }
    }
}

fn check_demos(x_demo: &Mat, y_demo: &[f64], query: &[f64]) -> Result<()> {
    if x_demo.cols() == 0 || x_demo.cols() != y_demo.len() {
        return Err(contract(format!(
            "{} demonstration columns with {} labels",
            x_demo.cols(),
            y_demo.len()
        )));
    }
    if query.len() != x_demo.rows() {
        return Err(contract(format!("query of length {} in dimension {}", query.len(), x_demo.rows())));
    }
    Ok(())
}

/// `f_0(query) … f_{k+1}(query)` for functional GD from `f_0 = 0` with the
/// given per-step rates.
pub fn fgd_run(kernel: KernelSpec, x_demo: &Mat, y_demo: &[f64], rates: &[f64], query: &[f64]) -> Result<Vec<f64>> {
    check_demos(x_demo, y_demo, query)?;
    if rates.iter().any(|r| !r.is_finite()) {
        return Err(contract("rates must be finite"));
    }
    let gram = kernel_matrix(kernel, x_demo, None)?.m;
    let mut state = FgdState::zero(kernel, x_demo.clone());
    let mut out = Vec::with_capacity(rates.len() + 1);
    out.push(state.eval(query)?);
    for &rate in rates {
        state.step(&gram, y_demo, rate);
        out.push(state.eval(query)?);
    }
    Ok(out)
}

/// `V_ℓ = [[0, 0], [0, −rate_ℓ]]`, `B_ℓ = C_ℓ = I`.
pub fn construction_params(d: usize, rates: &[f64]) -> Result<TfParams> {
    if d == 0 {
        return Err(contract("d must be at least 1"));
    }
    Ok(TfParams {
        layers: rates
            .iter()
            .map(|&rate| LayerParams { a: ABlock::Zero, r: -rate, b: Mat::identity(d), c: Mat::identity(d) })
            .collect(),
    })
}

/// Construction for a specific kernel: [`construction_params`] with the query/key
/// weights rescaled so that `ĥ(B x, C w) = K(x, w)` also for an exp kernel
/// with bandwidth and sign (`B = I/σ`, `C = sign·I/σ`).
pub fn construction_for_kernel(kernel: KernelSpec, d: usize, rates: &[f64]) -> Result<(TfParams, Activation)> {
    kernel.validate()?;
    let mut params = construction_params(d, rates)?;
    if let KernelSpec::Exp { sigma, sign } = kernel {
        for l in &mut params.layers {
            l.b = Mat::identity(d).scale(1.0 / sigma);
            l.c = Mat::identity(d).scale(sign / sigma);
        }
    }
    let act = Activation::matching(kernel).expect("every kernel has a matching activation");
    Ok((params, act))
}

/// Demonstrations plus query packed as a masked input `Z_0`.
pub(crate) fn pack_input(x_demo: &Mat, y_demo: &[f64], query: &[f64]) -> Mat {
    let (d, n) = x_demo.shape();
    let mut z = Mat::zeros(d + 1, n + 1);
    for i in 0..d {
        z.row_mut(i)[..n].copy_from_slice(x_demo.row(i));
        z[(i, n)] = query[i];
    }
    z.row_mut(d)[..n].copy_from_slice(y_demo);
    z
}

/// Label estimates `−[Z_ℓ]_{d+1,n+1}` of the constructed transformer at every layer.
pub fn transformer_estimates(
    kernel: KernelSpec,
    x_demo: &Mat,
    y_demo: &[f64],
    rates: &[f64],
    query: &[f64],
) -> Result<Vec<f64>> {
    check_demos(x_demo, y_demo, query)?;
    let (params, act) = construction_for_kernel(kernel, x_demo.rows(), rates)?;
    if params.layers.is_empty() {
        return Ok(vec![0.0]);
    }
    let traj = forward(&params, act, &pack_input(x_demo, y_demo, query))?;
    Ok((0..traj.zs.len()).map(|l| -traj.query_entry(l)).collect())
}

/// Default ridge for [`bayes_predict`]: `1e-10 · trace(K̂) / n`.
pub fn default_jitter(gram: &Mat) -> f64 {
    1e-10 * gram.trace() / gram.rows() as f64
}

/// Posterior mean `νᵀ (K̂ + jitter·I)⁻¹ Ŷ` of the query label, solved through
/// the eigendecomposition of `K̂`.
pub fn bayes_predict(kernel: KernelSpec, x_demo: &Mat, y_demo: &[f64], query: &[f64], jitter: Option<f64>) -> Result<f64> {
    check_demos(x_demo, y_demo, query)?;
    if !kernel.is_psd() {
        return Err(contract(format!("bayes predictor needs a PSD kernel, got {kernel}")));
    }
    let gram = kernel_matrix(kernel, x_demo, None)?.m;
    let jitter = jitter.unwrap_or_else(|| default_jitter(&gram));
    let eig = sym_eig(&gram)?;
    let scale = eig.max_abs_value() + jitter.abs();
    let nu: Vec<f64> = (0..x_demo.cols())
        .map(|i| kernel_eval(kernel, query, &x_demo.col(i)))
        .collect::<Result<_>>()?;
    let mut acc = 0.0;
    for (k, &lam) in eig.values.iter().enumerate() {
        let shifted = lam + jitter;
        if !(shifted > 1e-14 * scale) {
            return Err(Error::Singular { eigenvalue: shifted });
        }
        let u = eig.vectors.col(k);
        acc += dot(&u, &nu) * dot(&u, y_demo) / shifted;
    }
    Ok(acc)
}

/// Largest `|1 − δλ|` over the non-negligible eigenvalues of the demo Gram
/// matrix: the asymptotic per-layer error ratio of [`neumann_converges`].
/// Eigenvalues below `1e-12 · λ_max` are skipped; their components never
/// reach the prediction when the query lies in the Gram range.
pub fn neumann_contraction(kernel: KernelSpec, x_demo: &Mat, delta: f64) -> Result<f64> {
    let eig = sym_eig(&kernel_matrix(kernel, x_demo, None)?.m)?;
    let top = eig.max_abs_value();
    Ok(eig
        .values
        .iter()
        .filter(|&&l| l.abs() > 1e-12 * top)
        .fold(0.0, |m, &l| m.max((1.0 - delta * l).abs())))
}

/// Estimates of the constructed transformer with constant rate `delta` for
/// `max_layers` layers; they converge to [`bayes_predict`].
pub fn neumann_converges(
    kernel: KernelSpec,
    x_demo: &Mat,
    y_demo: &[f64],
    query: &[f64],
    delta: f64,
    max_layers: usize,
) -> Result<Vec<f64>> {
    check_demos(x_demo, y_demo, query)?;
    if !kernel.is_psd() {
        return Err(contract(format!("Neumann convergence needs a PSD kernel, got {kernel}")));
    }
    let lam_max = sym_eig(&kernel_matrix(kernel, x_demo, None)?.m)?.values[0];
    if !(delta > 0.0 && delta * lam_max < 1.0) {
        return Err(contract(format!("delta {delta} outside (0, 1/{lam_max})")));
    }
    transformer_estimates(kernel, x_demo, y_demo, &vec![delta; max_layers], query)
}

/// Mean squared error of [`bayes_predict`] on the query labels of `batch`,
/// with covariates mapped through `precond` first (the map under which the
/// labels were drawn).
pub fn bayes_risk(kernel: KernelSpec, batch: &[Prompt], precond: &Mat) -> Result<f64> {
    if batch.is_empty() {
        return Err(contract("bayes risk needs a nonempty batch"));
    }
    let errors = batch
        .par_iter()
        .map(|p| {
            let (x, y) = p.demos();
            let q = precond.matvec(&p.query())?;
            let pred = bayes_predict(kernel, &precond.matmul(&x)?, &y, &q, None)?;
            Ok((pred - p.query_label()).powi(2))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errors.iter().sum::<f64>() / batch.len() as f64)
}

/// Parameter-space GD on `½ Σ (⟨xᵢ, θ⟩ − yᵢ)²`.
#[derive(Clone, Debug)]
pub struct LinearGdState {
    pub theta: Vec<f64>,
    pub history: Vec<Vec<f64>>,
}

impl LinearGdState {
    pub fn new(d: usize) -> Self {
        LinearGdState { theta: vec![0.0; d], history: vec![vec![0.0; d]] }
    }

    pub fn step(&mut self, x_demo: &Mat, y_demo: &[f64], rate: f64) {
        let d = self.theta.len();
        let mut grad = vec![0.0; d];
        for (i, &y) in y_demo.iter().enumerate() {
            let xi = x_demo.col(i);
            let resid = dot(&xi, &self.theta) - y;
            for (g, x) in grad.iter_mut().zip(&xi) {
                *g += resid * x;
            }
        }
        for (t, g) in self.theta.iter_mut().zip(grad) {
            *t -= rate * g;
        }
        self.history.push(self.theta.clone());
    }
}

/// `⟨θ_ℓ, query⟩` for every iterate `θ_0 = 0, θ_1, …`.
pub fn linear_gd_oracle(x_demo: &Mat, y_demo: &[f64], rates: &[f64], query: &[f64]) -> Result<Vec<f64>> {
    check_demos(x_demo, y_demo, query)?;
    let mut state = LinearGdState::new(x_demo.rows());
    for &rate in rates {
        state.step(x_demo, y_demo, rate);
    }
    Ok(state.history.iter().map(|t| dot(t, query)).collect())
}
