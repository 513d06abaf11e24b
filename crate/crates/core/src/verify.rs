//! Randomized property suites shared by the `verify` command and the
//! acceptance tests. Every suite returns the largest error it observed.

use std::fmt;
use std::io::Write;

use crate::config::ExperimentConfig;
use crate::data::{assemble_prompt, Prompt};
use crate::error::{contract, Error, Result};
use crate::funcgd::{fgd_run, linear_gd_oracle, transformer_estimates};
use crate::kernels::{abs_eigen, KernelSpec};
use crate::linalg::{random_orthogonal, sym_eig, Mat, Rng};
use crate::train::{grad_analytic, grad_fd, icl_loss, loss_trace_form};
use crate::transformer::{activation_apply, forward, ABlock, Activation, TfParams};

pub const TOL_CONSTRUCTION: f64 = 1e-9;
pub const TOL_LINEAR_GD: f64 = 1e-10;
pub const TOL_GRADIENT: f64 = 1e-5;
pub const TOL_TRACE_FORM: f64 = 1e-9;
pub const TOL_SOFTMAX: f64 = 1e-12;
pub const TOL_INVARIANCE: f64 = 1e-9;
pub const TOL_KMAT_PSD: f64 = 1e-10;
pub const TOL_KMAT_FIXED_POINT: f64 = 1e-10;

/// Gradient-check points whose smallest `|score|` on a ReluDot layer falls
/// below this are redrawn.
pub const RELU_KINK_MARGIN: f64 = 1e-4;

/// Gradient-check points where a nonzero finite-difference tensor has a
/// norm below this are redrawn: the relative error there measures the
/// roundoff of the difference quotient rather than the analytic gradient.
pub const GRAD_NORM_FLOOR: f64 = 1e-4;

/// Random instances whose loss exceeds this (or overflows) are redrawn.
const LOSS_CAP: f64 = 1e3;

/// Redraw budget per instance.
const MAX_REDRAWS: usize = 1000;

/// Upper end of the log10 singular-value range of random invertible maps.
const LOG10_MAX_CONDITION: f64 = 3.0;

/// `d × cols` matrix with i.i.d. `N(0, 1/d)` entries.
fn random_covariates(d: usize, cols: usize, rng: &mut Rng) -> Mat {
    let s = 1.0 / (d as f64).sqrt();
    Mat::from_fn(d, cols, |_, _| s * rng.normal())
}

fn random_prompt(d: usize, n: usize, rng: &mut Rng) -> Result<Prompt> {
    let x = random_covariates(d, n + 1, rng);
    assemble_prompt(x, rng.normals(n + 1))
}

fn random_batch(d: usize, n: usize, size: usize, rng: &mut Rng) -> Result<Vec<Prompt>> {
    (0..size).map(|_| random_prompt(d, n, rng)).collect()
}

/// Entries `N(0, 1/d)` for `r`, `B`, `C` and `N(0, 1/(4d))` for `A`.
fn random_params(d: usize, layers: usize, full_a: bool, rng: &mut Rng) -> TfParams {
    let mut params = TfParams::gaussian(d, layers, full_a, 1.0 / (d as f64).sqrt(), rng);
    for l in &mut params.layers {
        if let ABlock::Full(a) = &mut l.a {
            *a = a.scale(0.5);
        }
    }
    params
}

/// Random parameters and batch with a finite loss of at most [`LOSS_CAP`],
/// also satisfying `accept`.
fn draw_instance(
    act: Activation,
    full_a: bool,
    max_d: usize,
    max_n: usize,
    rng: &mut Rng,
    accept: impl Fn(&TfParams, &[Prompt]) -> Result<bool>,
) -> Result<(TfParams, Vec<Prompt>)> {
    for _ in 0..MAX_REDRAWS {
        let (d, n) = dims(max_d, max_n, rng);
        let params = random_params(d, 1 + rng.below(3), full_a, rng);
        let batch = random_batch(d, n, 1 + rng.below(4), rng)?;
        let finite = match icl_loss(&params, act, &batch) {
            Ok(loss) => loss <= LOSS_CAP,
            Err(Error::Overflow { .. }) => false,
            Err(e) => return Err(e),
        };
        if finite && accept(&params, &batch)? {
            return Ok((params, batch));
        }
    }
    Err(contract(format!("no admissible {act} instance in {MAX_REDRAWS} draws")))
}

fn dims(max_d: usize, max_n: usize, rng: &mut Rng) -> (usize, usize) {
    (1 + rng.below(max_d), 1 + rng.below(max_n))
}

/// `(S, S⁻¹)` with `S = Q₁ diag(σ) Q₂` and condition number at most `10³`.
pub fn random_invertible(d: usize, rng: &mut Rng) -> Result<(Mat, Mat)> {
    let q1 = random_orthogonal(d, rng)?;
    let q2 = random_orthogonal(d, rng)?;
    let sv: Vec<f64> = (0..d).map(|_| 10f64.powf(LOG10_MAX_CONDITION * rng.uniform())).collect();
    let inv: Vec<f64> = sv.iter().map(|s| 1.0 / s).collect();
    let s = q1.matmul(&Mat::diag(&sv))?.matmul(&q2)?;
    let s_inv = q2.transpose().matmul(&Mat::diag(&inv))?.matmul(&q1.transpose())?;
    Ok((s, s_inv))
}

/// Transformer estimates under the kernel construction against functional GD
/// on random instances with `d ≤ max_d`, `n ≤ max_n`, at most six layers and
/// rates in `[−0.5, 0.5]`. Errors are scaled by `max(1, |f_ℓ(query)|)`,
/// since the iterates grow geometrically when `rate · λ_max(K̂) > 2`.
pub fn construction_equivalence(kernel: KernelSpec, instances: usize, max_d: usize, max_n: usize, rng: &mut Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (d, n) = dims(max_d, max_n, rng);
        let k = 1 + rng.below(6);
        let x = random_covariates(d, n, rng);
        let y = rng.normals(n);
        let q = random_covariates(d, 1, rng).into_vec();
        let rates: Vec<f64> = (0..k).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
        let tf = transformer_estimates(kernel, &x, &y, &rates, &q)?;
        let oracle = fgd_run(kernel, &x, &y, &rates, &q)?;
        worst = tf.iter().zip(&oracle).fold(worst, |m, (a, b)| m.max((a - b).abs() / b.abs().max(1.0)));
    }
    Ok(worst)
}

/// Functional GD with the linear kernel against parameter-space GD.
pub fn linear_gd_equivalence(instances: usize, max_d: usize, max_n: usize, rng: &mut Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (d, n) = dims(max_d, max_n, rng);
        let k = 1 + rng.below(6);
        let x = random_covariates(d, n, rng);
        let y = rng.normals(n);
        let q = random_covariates(d, 1, rng).into_vec();
        let rates: Vec<f64> = (0..k).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
        let fgd = fgd_run(KernelSpec::Linear, &x, &y, &rates, &q)?;
        let gd = linear_gd_oracle(&x, &y, &rates, &q)?;
        worst = fgd.iter().zip(&gd).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    Ok(worst)
}

/// Smallest `|score|` entering a ReluDot nonlinearity over the batch, rows
/// `0..n` only (the query row is masked).
fn min_abs_score(params: &TfParams, act: Activation, batch: &[Prompt]) -> Result<f64> {
    let mut min = f64::INFINITY;
    for p in batch {
        let traj = forward(params, act, &p.z0)?;
        for (l, layer) in params.layers.iter().enumerate() {
            let x = traj.x(l);
            let s = x.t_matmul(&layer.bt_c().matmul(&x)?)?;
            for i in 0..s.rows() - 1 {
                min = s.row(i).iter().fold(min, |m, v| m.min(v.abs()));
            }
        }
    }
    Ok(min)
}

/// Analytic against central-difference gradients, as the largest per-tensor
/// `‖Δ‖ / (1e-8 + ‖fd‖)`. ReluDot draws too close to a kink are redrawn.
pub fn gradient_check(
    act: Activation,
    full_a: bool,
    triples: usize,
    max_d: usize,
    max_n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..triples {
        let mut redraws = 0;
        let (analytic, fd) = loop {
            let not_kinked = |p: &TfParams, b: &[Prompt]| -> Result<bool> {
                Ok(act != Activation::ReluDot || min_abs_score(p, act, b)? > RELU_KINK_MARGIN)
            };
            let (params, batch) = draw_instance(act, full_a, max_d, max_n, rng, not_kinked)?;
            let fd = grad_fd(&params, act, &batch, None)?;
            let degenerate = fd.tensors().iter().any(|t| {
                let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                norm > 0.0 && norm < GRAD_NORM_FLOOR
            });
            if !degenerate {
                break (grad_analytic(&params, act, &batch)?, fd);
            }
            redraws += 1;
            if redraws == MAX_REDRAWS {
                return Err(contract("no well-scaled gradient-check point found"));
            }
        };
        worst = worst.max(analytic.max_relative_error(&fd));
    }
    Ok(worst)
}

/// `icl_loss` against the trace form on the unmasked trajectory.
pub fn trace_form_identity(
    act: Activation,
    full_a: bool,
    pairs: usize,
    max_d: usize,
    max_n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let (params, batch) = draw_instance(act, full_a, max_d, max_n, rng, |_, _| Ok(true))?;
        let a = icl_loss(&params, act, &batch)?;
        let b = loss_trace_form(&params, act, &batch)?;
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// MaskedSoftmax against ExpDot normalized per column over the demo rows.
pub fn softmax_exp_relation(inputs: usize, max_d: usize, max_n: usize, rng: &mut Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..inputs {
        let (d, n) = dims(max_d, max_n, rng);
        let u = random_covariates(d, n + 1, rng);
        let w = random_covariates(d, n + 1, rng);
        let soft = activation_apply(Activation::MaskedSoftmax, &u, &w)?;
        let exp = activation_apply(Activation::ExpDot, &u, &w)?;
        for j in 0..=n {
            let total: f64 = (0..n).map(|i| exp[(i, j)]).sum();
            for i in 0..n {
                worst = worst.max((soft[(i, j)] - exp[(i, j)] / total).abs());
            }
            worst = worst.max(soft[(n, j)].abs());
        }
    }
    Ok(worst)
}

/// `ĥ(SᵀU, S⁻¹W)` against `ĥ(U, W)` for random well-conditioned `S`.
pub fn activation_invariance(act: Activation, instances: usize, max_d: usize, max_n: usize, rng: &mut Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (d, n) = dims(max_d, max_n, rng);
        let u = random_covariates(d, n + 1, rng);
        let w = random_covariates(d, n + 1, rng);
        let (s, s_inv) = random_invertible(d, rng)?;
        let base = activation_apply(act, &u, &w)?;
        let moved = activation_apply(act, &s.t_matmul(&u)?, &s_inv.matmul(&w)?)?;
        worst = worst.max(base.max_abs_diff(&moved));
    }
    Ok(worst)
}

/// `icl_loss` after `(B, C) ↦ (ΛᵀB, Λ⁻¹C)` on every layer.
pub fn reparameterization_invariance(
    act: Activation,
    full_a: bool,
    instances: usize,
    max_d: usize,
    max_n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (params, batch) = draw_instance(act, full_a, max_d, max_n, rng, |_, _| Ok(true))?;
        let d = params.d();
        let mut moved = params.clone();
        for layer in &mut moved.layers {
            let (lam, lam_inv) = random_invertible(d, rng)?;
            layer.b = lam.t_matmul(&layer.b)?;
            layer.c = lam_inv.matmul(&layer.c)?;
        }
        worst = worst.max((icl_loss(&params, act, &batch)? - icl_loss(&moved, act, &batch)?).abs());
    }
    Ok(worst)
}

/// Errors of `Kmat_+` on random symmetric matrices: the most negative
/// eigenvalue of the output (reported as a non-negative shortfall) and the
/// deviation from being a fixed point.
pub fn kmat_plus_properties(matrices: usize, max_size: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let mut shortfall = 0.0f64;
    let mut fixed = 0.0f64;
    for _ in 0..matrices {
        let size = 1 + rng.below(max_size);
        let g = Mat::from_fn(size, size, |_, _| rng.normal());
        let m = g.add(&g.transpose())?.scale(0.5);
        let plus = abs_eigen(&m)?;
        let min = sym_eig(&plus)?.values.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        shortfall = shortfall.max(-min);
        fixed = fixed.max(abs_eigen(&plus)?.max_abs_diff(&plus));
    }
    Ok((shortfall, fixed))
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Measured { max_error: f64, tolerance: f64 },
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub outcome: Outcome,
}

impl Check {
    fn measured(name: impl Into<String>, max_error: f64, tolerance: f64) -> Self {
        Check { name: name.into(), outcome: Outcome::Measured { max_error, tolerance } }
    }

    /// Skipped checks do not fail.
    pub fn passed(&self) -> bool {
        match self.outcome {
            Outcome::Measured { max_error, tolerance } => max_error <= tolerance,
            Outcome::Skipped(_) => true,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.outcome {
            Outcome::Measured { max_error, tolerance } => write!(
                f,
                "{:<44} max_error={:<12.3e} tolerance={:<8.0e} {}",
                self.name,
                max_error,
                tolerance,
                if self.passed() { "PASS" } else { "FAIL" }
            ),
            Outcome::Skipped(why) => write!(f, "{:<44} skipped: {why}", self.name),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for c in &self.checks {
            writeln!(out, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed()).count();
        writeln!(out, "{} checks, {} failed", self.checks.len(), failed)?;
        Ok(())
    }
}

/// Runs every suite at the configured dimensions. Checks that need the
/// kernel construction run only when the activation matches the kernel.
pub fn run_verify(config: &ExperimentConfig) -> Result<VerifyReport> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let (d, n) = (config.d, config.n);
    let m = config.verify.instances;
    let act = config.activation;
    let mut checks = Vec::new();

    let name = format!("construction_equivalence({}, {})", config.kernel.tag(), act.tag());
    checks.push(if Activation::matching(config.kernel) == Some(act) {
        Check::measured(name, construction_equivalence(config.kernel, m, d, n, &mut root.split(1))?, TOL_CONSTRUCTION)
    } else {
        Check { name, outcome: Outcome::Skipped("no matching kernel".into()) }
    });
    checks.push(Check::measured(
        "linear_gd_equivalence",
        linear_gd_equivalence(m, d, n, &mut root.split(2))?,
        TOL_LINEAR_GD,
    ));
    for (i, full_a) in [false, true].into_iter().enumerate() {
        let variant = if full_a { "full" } else { "sparse" };
        let stream = 10 + 10 * i as u64;
        checks.push(Check::measured(
            format!("gradient_check({}, {variant})", act.tag()),
            gradient_check(act, full_a, config.verify.grad_triples, d, n, &mut root.split(stream))?,
            TOL_GRADIENT,
        ));
        checks.push(Check::measured(
            format!("trace_form_identity({}, {variant})", act.tag()),
            trace_form_identity(act, full_a, m, d, n, &mut root.split(stream + 1))?,
            TOL_TRACE_FORM,
        ));
        checks.push(Check::measured(
            format!("reparameterization_invariance({}, {variant})", act.tag()),
            reparameterization_invariance(act, full_a, m, d, n, &mut root.split(stream + 2))?,
            TOL_INVARIANCE,
        ));
    }
    checks.push(Check::measured(
        format!("activation_invariance({})", act.tag()),
        activation_invariance(act, m, d, n, &mut root.split(3))?,
        TOL_INVARIANCE,
    ));
    checks.push(Check::measured(
        "softmax_exp_relation",
        softmax_exp_relation(m, d, n, &mut root.split(4))?,
        TOL_SOFTMAX,
    ));
    let (shortfall, fixed) = kmat_plus_properties(m, n, &mut root.split(5))?;
    checks.push(Check::measured("kmat_plus_psd", shortfall, TOL_KMAT_PSD));
    checks.push(Check::measured("kmat_plus_fixed_point", fixed, TOL_KMAT_FIXED_POINT));
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_invertible_is_inverse_pair() {
        let mut rng = Rng::new(3);
        for d in 1..6 {
            let (s, s_inv) = random_invertible(d, &mut rng).unwrap();
            assert!(s.matmul(&s_inv).unwrap().max_abs_diff(&Mat::identity(d)) < 1e-10);
        }
    }

    #[test]
    fn small_suites_pass() {
        let mut rng = Rng::new(5);
        assert!(construction_equivalence(KernelSpec::Relu, 20, 4, 6, &mut rng).unwrap() <= TOL_CONSTRUCTION);
        assert!(linear_gd_equivalence(20, 4, 6, &mut rng).unwrap() <= TOL_LINEAR_GD);
        assert!(softmax_exp_relation(20, 4, 6, &mut rng).unwrap() <= TOL_SOFTMAX);
        assert!(gradient_check(Activation::ReluDot, true, 3, 3, 4, &mut rng).unwrap() <= TOL_GRADIENT);
    }

    #[test]
    fn softmax_config_skips_construction() {
        let c = ExperimentConfig::parse(
            "d = 2\nn = 3\nsigma = identity\nactivation = softmax\nverify.instances = 3\nverify.grad_triples = 1\n",
        )
        .unwrap();
        let report = run_verify(&c).unwrap();
        let construction = report.get("construction_equivalence(relu, softmax)").unwrap();
        assert_eq!(construction.outcome, Outcome::Skipped("no matching kernel".into()));
        assert!(construction.to_string().contains("skipped: no matching kernel"));
        assert!(report.all_passed());
    }

    #[test]
    fn failing_check_is_reported() {
        let c = Check::measured("x", 1.0, 0.5);
        assert!(!c.passed());
        let report = VerifyReport { checks: vec![c] };
        let mut buf = Vec::new();
        report.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("FAIL") && text.ends_with("1 checks, 1 failed\n"));
    }
}
