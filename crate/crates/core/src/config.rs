//! Experiment configuration in a flat `key = value` text format.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' any*
//! entry   := key '=' value
//! key     := name ('.' name)*        e.g. train.steps, sweep.n_values
//! value   := scalar | scalar (',' scalar)*
//! ```
//!
//! Unknown keys and repeated keys are errors. Missing keys take defaults;
//! [`ExperimentConfig::to_text`] writes every key so the output re-parses to
//! the same value.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::data::{CovariateKind, CovariateSpec, LabelSpec, PromptSampler, Sigma, SigmaSpec};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::train::ClipMode;
use crate::transformer::Activation;

/// Which value-matrix blocks are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameterization {
    /// `A`, `r`, `B`, `C` all trained.
    Full,
    /// `A = 0`; only `r`, `B`, `C` trained.
    Sparse,
}

impl Parameterization {
    pub fn full_a(&self) -> bool {
        matches!(self, Parameterization::Full)
    }
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parameterization::Full => "full",
            Parameterization::Sparse => "sparse",
        })
    }
}

impl FromStr for Parameterization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Parameterization::Full),
            "sparse" => Ok(Parameterization::Sparse),
            _ => Err(format!("expected 'full' or 'sparse', got '{s}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    /// Gaussian-process labels under the configured kernel.
    Kgp,
    /// Random two-layer relu network per prompt.
    TwoLayerRelu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch: usize,
    pub resample_every: usize,
    pub lr: f64,
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub runs: usize,
    pub eval_every: usize,
    pub eval_batch: usize,
    pub init_scale: f64,
    pub cosine_decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub kernel_values: Vec<KernelSpec>,
    pub n_values: Vec<usize>,
    pub activation_values: Vec<Activation>,
    pub layers_values: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    /// Random instances per algebraic check.
    pub instances: usize,
    /// Random (params, batch) triples per gradient-check cell.
    pub grad_triples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub d: usize,
    pub n: usize,
    pub layers: usize,
    pub kernel: KernelSpec,
    pub activation: Activation,
    pub sigma_diag: Option<Vec<f64>>,
    pub sigma_rotation_seed: u64,
    pub covariates: CovariateKind,
    pub labels: LabelKind,
    pub hidden: usize,
    pub parameterization: Parameterization,
    pub train: TrainingConfig,
    pub sweep: SweepConfig,
    pub verify: VerifyConfig,
}

const KEYS: &[&str] = &[
    "seed",
    "d",
    "n",
    "layers",
    "kernel",
    "activation",
    "sigma",
    "sigma.diag",
    "sigma.rotation_seed",
    "covariates",
    "labels",
    "labels.hidden",
    "parameterization",
    "train.steps",
    "train.batch",
    "train.resample_every",
    "train.lr",
    "train.clip",
    "train.clip_mode",
    "train.runs",
    "train.eval_every",
    "train.eval_batch",
    "train.init_scale",
    "train.cosine_decay",
    "sweep.kernel_values",
    "sweep.n_values",
    "sweep.activation_values",
    "sweep.layers_values",
    "verify.instances",
    "verify.grad_triples",
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::parse("").expect("defaults are valid")
    }
}

struct Entry {
    line: usize,
    value: String,
}

struct Entries {
    map: std::collections::BTreeMap<String, Entry>,
}

impl Entries {
    fn get<T>(&self, key: &str, default: T, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(e) => parse(e.value.trim()).map_err(|m| Error::Config { line: e.line, message: format!("{key}: {m}") }),
        }
    }

    fn line(&self, key: &str) -> usize {
        self.map.get(key).map_or(0, |e| e.line)
    }
}

fn parse_num<T: FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("invalid number '{s}'"))
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected 'true' or 'false', got '{s}'")),
    }
}

/// Splits a comma list, respecting parentheses so `exp(2,-1)` stays whole.
fn split_list(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_list<T>(s: &str, item: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    split_list(s).iter().map(|v| item(v)).collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses `text`, then replaces or adds each `key=value` override before
    /// defaults are filled, so derived defaults follow overridden values.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        let known: BTreeSet<&str> = KEYS.iter().copied().collect();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap().trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::Config { line, message: format!("expected 'key = value', got '{body}'") })?;
            let key = key.trim();
            if !known.contains(key) {
                return Err(Error::Config { line, message: format!("unknown key '{key}'") });
            }
            if map.insert(key.to_string(), Entry { line, value: value.trim().to_string() }).is_some() {
                return Err(Error::Config { line, message: format!("duplicate key '{key}'") });
            }
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config { line: 0, message: format!("override is not 'key=value': '{o}'") })?;
            let key = key.trim();
            if !known.contains(key) {
                return Err(Error::Config { line: 0, message: format!("unknown override key '{key}'") });
            }
            map.insert(key.to_string(), Entry { line: 0, value: value.trim().to_string() });
        }
        Self::from_entries(&Entries { map })
    }

    fn from_entries(e: &Entries) -> Result<Self> {
        let seed = e.get("seed", 0u64, parse_num)?;
        let d = e.get("d", 5usize, parse_num)?;
        let n = e.get("n", 30usize, parse_num)?;
        let layers = e.get("layers", 3usize, parse_num)?;
        let kernel = e.get("kernel", KernelSpec::Relu, |s| s.parse().map_err(|x: Error| x.to_string()))?;
        let activation = e.get("activation", Activation::ReluDot, |s| s.parse().map_err(|x: Error| x.to_string()))?;
        let sigma_kind = e.get("sigma", "rotated".to_string(), |s| match s {
            "identity" | "rotated" => Ok(s.to_string()),
            _ => Err(format!("expected 'identity' or 'rotated', got '{s}'")),
        })?;
        let diag = e.get("sigma.diag", vec![1.0, 1.0, 0.25, 2.25, 1.0], |s| parse_list(s, parse_num))?;
        let sigma_rotation_seed = e.get("sigma.rotation_seed", seed, parse_num)?;
        let covariates = e.get("covariates", CovariateKind::SphereIid, |s| s.parse().map_err(|x: Error| x.to_string()))?;
        let labels = e.get("labels", LabelKind::Kgp, |s| match s {
            "kgp" => Ok(LabelKind::Kgp),
            "two_layer_relu" => Ok(LabelKind::TwoLayerRelu),
            _ => Err(format!("expected 'kgp' or 'two_layer_relu', got '{s}'")),
        })?;
        let hidden = e.get("labels.hidden", 4 * d, parse_num)?;
        let parameterization = e.get("parameterization", Parameterization::Sparse, |s| s.parse())?;

        let train = TrainingConfig {
            steps: e.get("train.steps", 3000, parse_num)?,
            batch: e.get("train.batch", 2048, parse_num)?,
            resample_every: e.get("train.resample_every", 10, parse_num)?,
            lr: e.get("train.lr", 1e-3, parse_num)?,
            clip: e.get("train.clip", 0.01, parse_num)?,
            clip_mode: e.get("train.clip_mode", ClipMode::Frobenius, |s| match s {
                "frobenius" => Ok(ClipMode::Frobenius),
                "elementwise" => Ok(ClipMode::Elementwise),
                _ => Err(format!("expected 'frobenius' or 'elementwise', got '{s}'")),
            })?,
            runs: e.get("train.runs", 3, parse_num)?,
            eval_every: e.get("train.eval_every", 100, parse_num)?,
            eval_batch: e.get("train.eval_batch", 8192, parse_num)?,
            init_scale: e.get("train.init_scale", 0.1 / (d.max(1) as f64).sqrt(), parse_num)?,
            cosine_decay: e.get("train.cosine_decay", false, parse_bool)?,
        };
        let sweep = SweepConfig {
            kernel_values: e.get("sweep.kernel_values", vec![kernel], |s| {
                parse_list(s, |v| v.parse::<KernelSpec>().map_err(|x| x.to_string()))
            })?,
            n_values: e.get("sweep.n_values", vec![2, 4, 6, 8, 10, 12], |s| parse_list(s, parse_num))?,
            activation_values: e.get("sweep.activation_values", Activation::ALL.to_vec(), |s| {
                parse_list(s, |v| v.parse::<Activation>().map_err(|x| x.to_string()))
            })?,
            layers_values: e.get("sweep.layers_values", vec![layers], |s| parse_list(s, parse_num))?,
        };
        let verify = VerifyConfig {
            instances: e.get("verify.instances", 200, parse_num)?,
            grad_triples: e.get("verify.grad_triples", 50, parse_num)?,
        };

        let cfg = ExperimentConfig {
            seed,
            d,
            n,
            layers,
            kernel,
            activation,
            sigma_diag: if sigma_kind == "rotated" { Some(diag) } else { None },
            sigma_rotation_seed,
            covariates,
            labels,
            hidden,
            parameterization,
            train,
            sweep,
            verify,
        };
        cfg.validate_with(|key| e.line(key))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(|_| 0)
    }

    fn validate_with(&self, line: impl Fn(&str) -> usize) -> Result<()> {
        let fail = |key: &str, message: String| Err(Error::Config { line: line(key), message: format!("{key}: {message}") });
        let positive = [
            ("d", self.d),
            ("n", self.n),
            ("layers", self.layers),
            ("labels.hidden", self.hidden),
            ("train.batch", self.train.batch),
            ("train.resample_every", self.train.resample_every),
            ("train.runs", self.train.runs),
            ("train.eval_every", self.train.eval_every),
            ("train.eval_batch", self.train.eval_batch),
        ];
        for (key, v) in positive {
            if v == 0 {
                return fail(key, "must be positive".into());
            }
        }
        if let Err(e) = self.kernel.validate() {
            return fail("kernel", e.to_string());
        }
        if let Some(diag) = &self.sigma_diag {
            if diag.len() != self.d {
                return fail("sigma.diag", format!("has {} entries, expected d = {}", diag.len(), self.d));
            }
            if diag.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return fail("sigma.diag", "entries must be positive".into());
            }
        }
        if let CovariateKind::GaussianMixture { num_clusters: 0 } = self.covariates {
            return fail("covariates", "mixture needs at least one cluster".into());
        }
        for (key, v) in [("train.lr", self.train.lr), ("train.clip", self.train.clip), ("train.init_scale", self.train.init_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(key, "must be a positive number".into());
            }
        }
        if self.sweep.kernel_values.is_empty() {
            return fail("sweep.kernel_values", "must not be empty".into());
        }
        if self.sweep.n_values.is_empty() || self.sweep.n_values.contains(&0) {
            return fail("sweep.n_values", "must be a nonempty list of positive counts".into());
        }
        if self.sweep.activation_values.is_empty() {
            return fail("sweep.activation_values", "must not be empty".into());
        }
        if self.sweep.layers_values.is_empty() || self.sweep.layers_values.contains(&0) {
            return fail("sweep.layers_values", "must be a nonempty list of positive counts".into());
        }
        if self.verify.instances == 0 || self.verify.grad_triples == 0 {
            return fail("verify.instances", "verification counts must be positive".into());
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.sweep;
        let diag = self.sigma_diag.clone().unwrap_or_else(|| vec![1.0; self.d]);
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("d", self.d.to_string()),
            ("n", self.n.to_string()),
            ("layers", self.layers.to_string()),
            ("kernel", self.kernel.to_string()),
            ("activation", self.activation.to_string()),
            ("sigma", if self.sigma_diag.is_some() { "rotated" } else { "identity" }.into()),
            ("sigma.diag", diag.iter().map(|v| float(*v)).collect::<Vec<_>>().join(", ")),
            ("sigma.rotation_seed", self.sigma_rotation_seed.to_string()),
            ("covariates", self.covariates.to_string()),
            (
                "labels",
                match self.labels {
                    LabelKind::Kgp => "kgp",
                    LabelKind::TwoLayerRelu => "two_layer_relu",
                }
                .into(),
            ),
            ("labels.hidden", self.hidden.to_string()),
            ("parameterization", self.parameterization.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.resample_every", t.resample_every.to_string()),
            ("train.lr", float(t.lr)),
            ("train.clip", float(t.clip)),
            (
                "train.clip_mode",
                match t.clip_mode {
                    ClipMode::Frobenius => "frobenius",
                    ClipMode::Elementwise => "elementwise",
                }
                .into(),
            ),
            ("train.runs", t.runs.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.eval_batch", t.eval_batch.to_string()),
            ("train.init_scale", float(t.init_scale)),
            ("train.cosine_decay", t.cosine_decay.to_string()),
            ("sweep.kernel_values", join(&s.kernel_values)),
            ("sweep.n_values", join(&s.n_values)),
            ("sweep.activation_values", join(&s.activation_values)),
            ("sweep.layers_values", join(&s.layers_values)),
            ("verify.instances", self.verify.instances.to_string()),
            ("verify.grad_triples", self.verify.grad_triples.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Σ for run `run`: the rotation is redrawn per run from the rotation seed.
    pub fn sigma_for_run(&self, run: usize) -> Result<Sigma> {
        match &self.sigma_diag {
            None => SigmaSpec::Identity.resolve(self.d),
            Some(diag) => SigmaSpec::RotatedDiag {
                diag: diag.clone(),
                rotation_seed: crate::linalg::Rng::new(self.sigma_rotation_seed).split(run as u64).seed(),
            }
            .resolve(self.d),
        }
    }

    pub fn label_spec(&self) -> LabelSpec {
        match self.labels {
            LabelKind::Kgp => LabelSpec::Kgp(self.kernel),
            LabelKind::TwoLayerRelu => LabelSpec::TwoLayerRelu { hidden: self.hidden },
        }
    }

    pub fn sampler(&self, sigma: Sigma) -> Result<PromptSampler> {
        Ok(PromptSampler { covariates: CovariateSpec::new(self.covariates, sigma)?, labels: self.label_spec(), n: self.n })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ExperimentConfig::default();
        assert_eq!((c.d, c.n, c.layers), (5, 30, 3));
        assert_eq!(c.sigma_diag, Some(vec![1.0, 1.0, 0.25, 2.25, 1.0]));
        assert_eq!(c.train.resample_every, 10);
        assert_eq!(c.train.clip, 0.01);
        assert_eq!(c.train.runs, 3);
        assert_eq!(c.train.lr, 1e-3);
        assert!((c.train.init_scale - 0.1 / 5f64.sqrt()).abs() < 1e-17);
        assert_eq!(c.hidden, 20);
        assert_eq!(c.sweep.n_values, vec![2, 4, 6, 8, 10, 12]);
    }

    #[test]
    fn round_trip() {
        let text = "seed = 9\nd = 3\nkernel = exp(2,-1)\nsigma = identity\nsweep.activation_values = linear, softmax\n\
                    sweep.kernel_values = linear, exp(0.5,1)\ncovariates = gmm(3)\nlabels = two_layer_relu\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.kernel, KernelSpec::exp(2.0, -1.0).unwrap());
        assert_eq!(c.sweep.kernel_values.len(), 2);
        assert_eq!(c.hidden, 12);
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn errors_carry_lines() {
        let err = ExperimentConfig::parse("d = 3\n\nn = x\n").unwrap_err();
        assert_eq!(err, Error::Config { line: 3, message: "n: invalid number 'x'".into() });
        assert!(matches!(ExperimentConfig::parse("bogus = 1"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("d = 1\nd = 2"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(ExperimentConfig::parse("no equals sign"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("sweep.activation_values ="), Err(Error::Config { .. })));
        assert!(matches!(ExperimentConfig::parse("d = 2"), Err(Error::Config { .. })), "diag length mismatch");
    }

    #[test]
    fn overrides() {
        let ov = |o: &[&str]| {
            ExperimentConfig::parse_with_overrides("n = 4\n", &o.iter().map(|s| s.to_string()).collect::<Vec<_>>())
        };
        let c = ov(&["n=12", "train.steps = 5", "d=2", "sigma=identity"]).unwrap();
        assert_eq!((c.n, c.train.steps, c.d, c.hidden), (12, 5, 2, 8));
        assert!(ov(&["nope=1"]).is_err());
        assert!(ov(&["n"]).is_err());
    }

    #[test]
    fn sigma_differs_per_run() {
        let c = ExperimentConfig::default();
        let a = c.sigma_for_run(0).unwrap();
        let b = c.sigma_for_run(1).unwrap();
        assert!(a.sigma.max_abs_diff(&b.sigma) > 1e-3);
        assert_eq!(a.sigma, c.sigma_for_run(0).unwrap().sigma);
    }
}
