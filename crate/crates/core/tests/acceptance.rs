use std::time::{Duration, Instant};

use rayon::prelude::*;

use iclfgd::config::ExperimentConfig;
use iclfgd::data::{CovariateKind, CovariateSpec, LabelSpec, PromptSampler, Sigma};
use iclfgd::funcgd::{bayes_predict, neumann_contraction, neumann_converges};
use iclfgd::kernels::{kernel_matrix, KernelSpec};
use iclfgd::linalg::{sym_eig, Rng};
use iclfgd::train::{run_training, RunHistory};
use iclfgd::transformer::Activation;
use iclfgd::verify::{self, TOL_GRADIENT, TOL_INVARIANCE, TOL_KMAT_FIXED_POINT, TOL_KMAT_PSD, TOL_LINEAR_GD};
use iclfgd::verify::{TOL_CONSTRUCTION, TOL_SOFTMAX, TOL_TRACE_FORM};

const CONSTRUCTION_LIMIT: Duration = Duration::from_secs(10);

const BAYES_TOL: f64 = 1e-6;
const BAYES_RATIO_TOL: f64 = 0.10;
const BAYES_LAYERS: usize = 2000;
const BAYES_INSTANCES: usize = 20;
const BAYES_LIMIT: Duration = Duration::from_secs(30);

const DIST_CEILING: f64 = 0.3;
const DIST_SHRINK: f64 = 0.5;
const SPARSE_TARGET: Duration = Duration::from_secs(20 * 60);

const ORDERING_STEPS: usize = 1500;

/// Prints one result line and fails the test when `passed` is false.
fn report(label: &str, passed: bool, detail: String) {
    println!("[{label}] {} ({detail})", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "{label}: {detail}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[test]
fn c01_transformer_reproduces_functional_gd() {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst = Vec::new();
    for kernel in [KernelSpec::Linear, KernelSpec::Relu, KernelSpec::EXP] {
        worst.push((kernel, verify::construction_equivalence(kernel, 200, 6, 12, &mut rng).unwrap()));
    }
    let elapsed = start.elapsed();
    let max = worst.iter().fold(0.0f64, |m, w| m.max(w.1));
    let detail: Vec<String> = worst.iter().map(|(k, e)| format!("{k} {e:.2e}")).collect();
    report(
        "1 functional gd",
        max <= TOL_CONSTRUCTION && elapsed < CONSTRUCTION_LIMIT,
        format!("{}, tol {TOL_CONSTRUCTION:.0e}, {elapsed:.2?} < {CONSTRUCTION_LIMIT:?}", detail.join(", ")),
    );
}

/// Least-squares slope of `ln e_ℓ` over the second half of the layers whose
/// error stays above `floor`, exponentiated.
fn fitted_ratio(errors: &[f64], floor: f64) -> Option<f64> {
    let last = errors.iter().rposition(|&e| e > floor)?;
    let first = last / 2;
    if last < first + 4 {
        return None;
    }
    let pts: Vec<(f64, f64)> = (first..=last).map(|l| (l as f64, errors[l].ln())).collect();
    let m = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / m, b + p.1 / m));
    let (sxy, sxx) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + (p.0 - mx) * (p.1 - my), b + (p.0 - mx).powi(2)));
    Some((sxy / sxx).exp())
}

#[test]
fn c02_deep_construction_reaches_the_bayes_predictor() {
    let mut lines = Vec::new();
    let mut passed = true;
    let start = Instant::now();
    for kernel in [KernelSpec::EXP, KernelSpec::Linear] {
        let sampler = PromptSampler {
            covariates: CovariateSpec::new(CovariateKind::SphereIid, Sigma::identity(3)).unwrap(),
            labels: LabelSpec::Kgp(kernel),
            n: 8,
        };
        let mut rng = Rng::new(202);
        let (mut worst_gap, mut worst_ratio) = (0.0f64, 0.0f64);
        for _ in 0..BAYES_INSTANCES {
            let p = sampler.sample(&mut rng).unwrap();
            let (x, y) = p.demos();
            let q = p.query();
            let lam = sym_eig(&kernel_matrix(kernel, &x, None).unwrap().m).unwrap().values[0];
            let delta = 0.5 / lam;
            let est = neumann_converges(kernel, &x, &y, &q, delta, BAYES_LAYERS).unwrap();
            let bayes = bayes_predict(kernel, &x, &y, &q, None).unwrap();
            let errors: Vec<f64> = est.iter().map(|e| (e - bayes).abs()).collect();
            worst_gap = worst_gap.max(errors[BAYES_LAYERS]);
            let predicted = neumann_contraction(kernel, &x, delta).unwrap();
            let floor = 1e-9 * bayes.abs().max(1.0);
            let deviation = match fitted_ratio(&errors, floor) {
                Some(r) => (r - predicted).abs() / predicted,
                None => f64::INFINITY,
            };
            worst_ratio = worst_ratio.max(deviation);
        }
        passed &= worst_gap <= BAYES_TOL && worst_ratio <= BAYES_RATIO_TOL;
        lines.push(format!("{kernel}: gap {worst_gap:.2e} tol {BAYES_TOL:.0e}, ratio off {:.1}%", 100.0 * worst_ratio));
    }
    let elapsed = start.elapsed();
    passed &= elapsed < BAYES_LIMIT;
    report("2 bayes limit", passed, format!("{}, {elapsed:.2?} < {BAYES_LIMIT:?}", lines.join("; ")));
}

#[test]
fn c03_linear_construction_matches_gradient_descent() {
    let err = verify::linear_gd_equivalence(100, 6, 12, &mut Rng::new(303)).unwrap();
    report("3 linear gd", err <= TOL_LINEAR_GD, format!("max error {err:.2e}, tol {TOL_LINEAR_GD:.0e}"));
}

#[test]
fn c04_backprop_matches_finite_differences() {
    let mut rng = Rng::new(404);
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for act in Activation::ALL {
        for full in [false, true] {
            let e = verify::gradient_check(act, full, 50, 5, 10, &mut rng).unwrap();
            worst = worst.max(e);
            detail.push(format!("{act}/{} {e:.1e}", if full { "full" } else { "sparse" }));
        }
    }
    report("4 gradients", worst <= TOL_GRADIENT, format!("{}, tol {TOL_GRADIENT:.0e}", detail.join(", ")));
}

#[test]
fn c05_loss_equals_its_trace_form() {
    let mut rng = Rng::new(505);
    let mut worst = 0.0f64;
    for act in Activation::ALL {
        for full in [false, true] {
            worst = worst.max(verify::trace_form_identity(act, full, 100, 5, 10, &mut rng).unwrap());
        }
    }
    report("5 trace form", worst <= TOL_TRACE_FORM, format!("max error {worst:.2e}, tol {TOL_TRACE_FORM:.0e}"));
}

#[test]
fn c06_softmax_is_normalized_exp() {
    let err = verify::softmax_exp_relation(100, 6, 12, &mut Rng::new(606)).unwrap();
    report("6 softmax", err <= TOL_SOFTMAX, format!("max error {err:.2e}, tol {TOL_SOFTMAX:.0e}"));
}

#[test]
fn c07_invariances() {
    let mut rng = Rng::new(707);
    let mut act_worst = 0.0f64;
    let mut rep_worst = 0.0f64;
    for act in Activation::ALL {
        act_worst = act_worst.max(verify::activation_invariance(act, 100, 5, 10, &mut rng).unwrap());
        for full in [false, true] {
            rep_worst = rep_worst.max(verify::reparameterization_invariance(act, full, 100, 5, 10, &mut rng).unwrap());
        }
    }
    report(
        "7 invariances",
        act_worst <= TOL_INVARIANCE && rep_worst <= TOL_INVARIANCE,
        format!("activation {act_worst:.2e}, reparameterization {rep_worst:.2e}, tol {TOL_INVARIANCE:.0e}"),
    );
}

#[test]
fn c08_kmat_plus_is_a_psd_fixed_point() {
    let (shortfall, fixed) = verify::kmat_plus_properties(1000, 8, &mut Rng::new(808)).unwrap();
    report(
        "8 kmat plus",
        shortfall <= TOL_KMAT_PSD && fixed <= TOL_KMAT_FIXED_POINT,
        format!("eigenvalue shortfall {shortfall:.2e} tol {TOL_KMAT_PSD:.0e}, fixed point {fixed:.2e} tol {TOL_KMAT_FIXED_POINT:.0e}"),
    );
}

const SPARSE_BASE: &str = "\
seed = 0
d = 5
n = 30
layers = 3
sigma = rotated
sigma.diag = 1, 1, 0.25, 2.25, 1
covariates = sphere
labels = kgp
parameterization = sparse
train.steps = 3000
train.batch = 2048
train.runs = 3
train.eval_every = 500
";

fn histories(config: &ExperimentConfig) -> Vec<RunHistory> {
    (0..config.train.runs).into_par_iter().map(|run| run_training(config, run).unwrap()).collect()
}

#[test]
fn c09_sparse_training_approaches_the_preconditioned_identity() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut passed = true;
    for (kernel, act) in [("linear", "relu"), ("relu", "relu"), ("exp", "softmax")] {
        let config =
            ExperimentConfig::parse(&format!("{SPARSE_BASE}kernel = {kernel}\nactivation = {act}\n")).unwrap();
        let runs = histories(&config);
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let initial = median(runs.iter().map(|h| h.first().unwrap().dist_bc[l]).collect());
            let last = median(runs.iter().map(|h| h.last().unwrap().dist_bc[l]).collect());
            passed &= last <= DIST_CEILING && last <= DIST_SHRINK * initial;
            layers.push(format!("{initial:.3}->{last:.3}"));
        }
        lines.push(format!("{kernel}/{act} {}", layers.join(" ")));
    }
    let elapsed = start.elapsed();
    report(
        "9 sparse training",
        passed,
        format!(
            "{}; ceiling {DIST_CEILING}, shrink {DIST_SHRINK}, {elapsed:.0?} (target {SPARSE_TARGET:?})",
            lines.join("; ")
        ),
    );
}

fn final_eval_median(kernel: &str, act: &str) -> f64 {
    let base = SPARSE_BASE
        .replace("n = 30\n", "n = 12\n")
        .replace("train.steps = 3000\n", &format!("train.steps = {ORDERING_STEPS}\n"));
    let config = ExperimentConfig::parse(&format!("{base}kernel = {kernel}\nactivation = {act}\n")).unwrap();
    median(histories(&config).iter().map(|h| h.last().unwrap().eval_loss).collect())
}

#[test]
fn c10_matching_activation_wins() {
    let relu_relu = final_eval_median("relu", "relu");
    let relu_linear = final_eval_median("relu", "linear");
    let linear_linear = final_eval_median("linear", "linear");
    let linear_relu = final_eval_median("linear", "relu");
    report(
        "10 activation ordering",
        relu_relu < relu_linear && linear_linear < linear_relu,
        format!(
            "relu labels: relu {relu_relu:.4e} vs linear {relu_linear:.4e}; \
             linear labels: linear {linear_linear:.4e} vs relu {linear_relu:.4e}"
        ),
    );
}
