//! Covariate and label distributions, and assembly of masked prompts.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::kernels::{kernel_matrix, sample_kgp_from_gram, KernelSpec};
use crate::linalg::{random_orthogonal, Mat, Rng};

/// How the covariate distortion Σ is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum SigmaSpec {
    Identity,
    /// `Σ = Uᵀ D U` with `U` Haar-random from `rotation_seed`.
    RotatedDiag { diag: Vec<f64>, rotation_seed: u64 },
}

/// A resolved covariance distortion with its square root and inverse square root.
#[derive(Clone, Debug)]
pub struct Sigma {
    pub spec: SigmaSpec,
    pub sigma: Mat,
    pub sqrt: Mat,
    pub inv_sqrt: Mat,
}

impl SigmaSpec {
    pub fn resolve(&self, d: usize) -> Result<Sigma> {
        if d == 0 {
            return Err(contract("covariate dimension must be at least 1"));
        }
        match self {
            SigmaSpec::Identity => Ok(Sigma {
                spec: self.clone(),
                sigma: Mat::identity(d),
                sqrt: Mat::identity(d),
                inv_sqrt: Mat::identity(d),
            }),
            SigmaSpec::RotatedDiag { diag, rotation_seed } => {
                if diag.len() != d {
                    return Err(contract(format!(
                        "sigma diagonal has {} entries, expected {d}",
                        diag.len()
                    )));
                }
                if diag.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return Err(contract("sigma diagonal entries must be positive"));
                }
                let u = random_orthogonal(d, &mut Rng::new(*rotation_seed))?;
                let conj = |vals: Vec<f64>| -> Result<Mat> {
                    let m = u.t_matmul(&Mat::diag(&vals).matmul(&u)?)?;
                    // Exact symmetry keeps downstream symmetric routines happy.
                    Ok(Mat::from_fn(d, d, |i, j| 0.5 * (m[(i, j)] + m[(j, i)])))
                };
                Ok(Sigma {
                    spec: self.clone(),
                    sigma: conj(diag.clone())?,
                    sqrt: conj(diag.iter().map(|v| v.sqrt()).collect())?,
                    inv_sqrt: conj(diag.iter().map(|v| 1.0 / v.sqrt()).collect())?,
                })
            }
        }
    }
}

impl Sigma {
    pub fn identity(d: usize) -> Self {
        SigmaSpec::Identity.resolve(d).expect("d >= 1")
    }

    pub fn dim(&self) -> usize {
        self.sigma.rows()
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.spec, SigmaSpec::Identity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovariateKind {
    SphereIid,
    GaussianIid,
    GaussianMixture { num_clusters: usize },
}

impl CovariateKind {
    pub const DEFAULT_CLUSTERS: usize = 2;
}

impl fmt::Display for CovariateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovariateKind::SphereIid => f.write_str("sphere"),
            CovariateKind::GaussianIid => f.write_str("gaussian"),
            CovariateKind::GaussianMixture { num_clusters } => write!(f, "gmm({num_clusters})"),
        }
    }
}

impl FromStr for CovariateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sphere" => Ok(CovariateKind::SphereIid),
            "gaussian" => Ok(CovariateKind::GaussianIid),
            "gmm" => Ok(CovariateKind::GaussianMixture { num_clusters: Self::DEFAULT_CLUSTERS }),
            other => {
                let k = other
                    .strip_prefix("gmm(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|v| v.trim().parse::<usize>().ok())
                    .ok_or_else(|| contract(format!("unknown covariate distribution '{other}'")))?;
                if k == 0 {
                    return Err(contract("gmm needs at least one cluster"));
                }
                Ok(CovariateKind::GaussianMixture { num_clusters: k })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct CovariateSpec {
    pub kind: CovariateKind,
    pub sigma: Sigma,
}

impl CovariateSpec {
    pub fn new(kind: CovariateKind, sigma: Sigma) -> Result<Self> {
        if let CovariateKind::GaussianMixture { num_clusters: 0 } = kind {
            return Err(contract("gmm needs at least one cluster"));
        }
        Ok(CovariateSpec { kind, sigma })
    }

    pub fn d(&self) -> usize {
        self.sigma.dim()
    }
}

/// Samples `n_plus_1` covariate columns.
pub fn sample_covariates(spec: &CovariateSpec, n_plus_1: usize, rng: &mut Rng) -> Result<Mat> {
    Ok(sample_covariates_with_means(spec, n_plus_1, rng)?.0)
}

/// Like [`sample_covariates`], also returning the undistorted cluster means
/// drawn for this prompt (empty unless the spec is a mixture).
pub fn sample_covariates_with_means(
    spec: &CovariateSpec,
    n_plus_1: usize,
    rng: &mut Rng,
) -> Result<(Mat, Vec<Vec<f64>>)> {
    if n_plus_1 < 2 {
        return Err(contract("a prompt needs at least one demonstration and a query"));
    }
    let d = spec.d();
    let mut raw = Mat::zeros(d, n_plus_1);
    let mut means = Vec::new();
    match spec.kind {
        CovariateKind::SphereIid => {
            for j in 0..n_plus_1 {
                let mut v = rng.normals(d);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                raw.set_col(j, &v);
            }
        }
        CovariateKind::GaussianIid => {
            for j in 0..n_plus_1 {
                raw.set_col(j, &rng.normals(d));
            }
        }
        CovariateKind::GaussianMixture { num_clusters } => {
            means = (0..num_clusters).map(|_| rng.normals(d)).collect();
            for j in 0..n_plus_1 {
                let mu = &means[rng.below(num_clusters)];
                let v: Vec<f64> = mu.iter().map(|m| m + rng.normal()).collect();
                raw.set_col(j, &v);
            }
        }
    }
    let x = if spec.sigma.is_identity() { raw } else { spec.sigma.sqrt.matmul(&raw)? };
    Ok((x, means))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelSpec {
    /// Jointly Gaussian labels with covariance `Kmat_+(X)`.
    Kgp(KernelSpec),
    /// `y = θ₂ᵀ relu(θ₁ x)` with fresh standard-normal weights per prompt.
    TwoLayerRelu { hidden: usize },
}

impl LabelSpec {
    pub fn two_layer_default(d: usize) -> Self {
        LabelSpec::TwoLayerRelu { hidden: 4 * d }
    }
}

/// Samples the full label row `y⁽¹⁾ … y⁽ⁿ⁺¹⁾` for covariates `x`.
pub fn sample_labels(spec: &LabelSpec, x: &Mat, sigma: &Sigma, rng: &mut Rng) -> Result<Vec<f64>> {
    if x.cols() < 2 {
        return Err(contract("labels need at least two covariate columns"));
    }
    match *spec {
        LabelSpec::Kgp(kernel) => {
            let precond = if sigma.is_identity() { None } else { Some(&sigma.inv_sqrt) };
            if kernel == KernelSpec::Linear {
                // Kmat = GᵀG with G = Σ^{-1/2}X, so Gᵀθ with θ ~ N(0, I_d) has
                // exactly the K-GP law.
                let g = match precond {
                    Some(p) => p.matmul(x)?,
                    None => x.clone(),
                };
                let theta = rng.normals(x.rows());
                return g.t_matmul(&Mat::column(&theta)).map(Mat::into_vec);
            }
            sample_kgp_from_gram(&kernel_matrix(kernel, x, precond)?.m, rng)
        }
        LabelSpec::TwoLayerRelu { hidden } => {
            if hidden == 0 {
                return Err(contract("two-layer relu labels need a positive hidden width"));
            }
            let d = x.rows();
            let theta1 = Mat::from_fn(hidden, d, |_, _| rng.normal());
            let theta2 = rng.normals(hidden);
            let act = theta1.matmul(x)?;
            Ok((0..x.cols())
                .map(|j| (0..hidden).map(|h| theta2[h] * act[(h, j)].max(0.0)).sum())
                .collect())
        }
    }
}

/// One in-context learning instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    /// Covariates, `d × (n+1)`; the last column is the query.
    pub x: Mat,
    /// All `n+1` labels including the held-out query label.
    pub y: Vec<f64>,
    /// `(d+1) × (n+1)` input with the query label zeroed.
    pub z0: Mat,
}

impl Prompt {
    pub fn d(&self) -> usize {
        self.x.rows()
    }

    /// Number of demonstrations.
    pub fn n(&self) -> usize {
        self.x.cols() - 1
    }

    pub fn query_label(&self) -> f64 {
        self.y[self.n()]
    }

    pub fn query(&self) -> Vec<f64> {
        self.x.col(self.n())
    }

    /// Demonstration covariates (`d × n`) and labels.
    pub fn demos(&self) -> (Mat, Vec<f64>) {
        let n = self.n();
        let x = Mat::from_fn(self.d(), n, |i, j| self.x[(i, j)]);
        (x, self.y[..n].to_vec())
    }
}

pub fn assemble_prompt(x: Mat, y: Vec<f64>) -> Result<Prompt> {
    if x.cols() < 2 {
        return Err(contract("a prompt needs at least one demonstration and a query"));
    }
    if y.len() != x.cols() {
        return Err(contract(format!("{} labels for {} covariate columns", y.len(), x.cols())));
    }
    let (d, cols) = x.shape();
    let mut z0 = Mat::zeros(d + 1, cols);
    for i in 0..d {
        z0.row_mut(i).copy_from_slice(x.row(i));
    }
    z0.row_mut(d)[..cols - 1].copy_from_slice(&y[..cols - 1]);
    Ok(Prompt { x, y, z0 })
}

/// Prompt distribution: covariates, labels and the number of demonstrations.
#[derive(Clone, Debug)]
pub struct PromptSampler {
    pub covariates: CovariateSpec,
    pub labels: LabelSpec,
    pub n: usize,
}

impl PromptSampler {
    pub fn sample(&self, rng: &mut Rng) -> Result<Prompt> {
        let x = sample_covariates(&self.covariates, self.n + 1, rng)?;
        let y = sample_labels(&self.labels, &x, &self.covariates.sigma, rng)?;
        assemble_prompt(x, y)
    }

    /// `count` independent prompts; prompt `i` draws from `rng.split(i)` so the
    /// batch does not depend on how the work is scheduled.
    pub fn sample_batch(&self, count: usize, rng: &Rng) -> Result<Vec<Prompt>> {
        (0..count)
            .into_par_iter()
            .map(|i| self.sample(&mut rng.split(i as u64)))
            .collect()
    }
}

const BATCH_MAGIC: &str = "iclfgd-prompts v1";

/// Writes prompts as text: a magic line, then per prompt one line
/// `d n x₁₁ … x_{d,n+1} y₁ … y_{n+1}` with `x` row-major. Floats use the
/// shortest representation that parses back to the same bits.
pub fn write_batch<W: Write>(mut out: W, prompts: &[Prompt]) -> Result<()> {
    writeln!(out, "{BATCH_MAGIC}")?;
    for p in prompts {
        write!(out, "{} {}", p.d(), p.n())?;
        for v in p.x.as_slice().iter().chain(&p.y) {
            write!(out, " {v:?}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_batch<R: BufRead>(input: R) -> Result<Vec<Prompt>> {
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(l)) if l.trim() == BATCH_MAGIC => {}
        _ => return Err(Error::Format("missing prompt batch header".into())),
    }
    let mut prompts = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("record {}: {what}", idx + 1));
        let mut fields = line.split_ascii_whitespace();
        let mut count = || -> Result<usize> {
            fields.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad shape"))
        };
        let d = count()?;
        let n = count()?;
        let values: Vec<f64> = line
            .split_ascii_whitespace()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|_| bad("bad number")))
            .collect::<Result<_>>()?;
        if d == 0 || n == 0 || values.len() != (d + 1) * (n + 1) {
            return Err(bad("wrong number of values"));
        }
        let (xs, ys) = values.split_at(d * (n + 1));
        prompts.push(assemble_prompt(Mat::from_vec(d, n + 1, xs.to_vec())?, ys.to_vec())?);
    }
    Ok(prompts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(d: usize) -> CovariateSpec {
        CovariateSpec::new(CovariateKind::SphereIid, Sigma::identity(d)).unwrap()
    }

    #[test]
    fn sigma_roots_are_inverse() {
        let spec = SigmaSpec::RotatedDiag { diag: vec![1.0, 1.0, 0.25, 2.25, 1.0], rotation_seed: 9 };
        let s = spec.resolve(5).unwrap();
        let prod = s.sqrt.matmul(&s.inv_sqrt).unwrap();
        assert!(prod.dist_frobenius(&Mat::identity(5)) <= 1e-10);
        let sq = s.sqrt.matmul(&s.sqrt).unwrap();
        assert!(sq.dist_frobenius(&s.sigma) <= 1e-10);
        assert!(spec.resolve(4).is_err());
        let neg = SigmaSpec::RotatedDiag { diag: vec![1.0, -1.0], rotation_seed: 0 };
        assert!(neg.resolve(2).is_err());
    }

    #[test]
    fn sphere_columns_are_unit() {
        let mut rng = Rng::new(1);
        let x = sample_covariates(&sphere(4), 50, &mut rng).unwrap();
        for j in 0..50 {
            let norm = x.col(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-12);
        }
        assert!(sample_covariates(&sphere(4), 1, &mut rng).is_err());
    }

    #[test]
    fn distorted_sphere_undoes_with_inverse_root() {
        let mut rng = Rng::new(2);
        let spec = SigmaSpec::RotatedDiag { diag: vec![4.0, 1.0], rotation_seed: 3 };
        let cov = CovariateSpec::new(CovariateKind::SphereIid, spec.resolve(2).unwrap()).unwrap();
        let x = sample_covariates(&cov, 20, &mut rng).unwrap();
        let back = cov.sigma.inv_sqrt.matmul(&x).unwrap();
        for j in 0..20 {
            let norm = back.col(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_cluster_mixture_centres_on_its_mean() {
        let mut rng = Rng::new(3);
        let cov =
            CovariateSpec::new(CovariateKind::GaussianMixture { num_clusters: 1 }, Sigma::identity(3))
                .unwrap();
        let cols = 100_000;
        let (x, means) = sample_covariates_with_means(&cov, cols, &mut rng).unwrap();
        let se = 1.0 / (cols as f64).sqrt();
        for i in 0..3 {
            let mean = x.row(i).iter().sum::<f64>() / cols as f64;
            assert!((mean - means[0][i]).abs() <= 3.0 * se, "coordinate {i}");
        }
    }

    #[test]
    fn identical_covariates_get_identical_kgp_labels() {
        let mut rng = Rng::new(4);
        let x = Mat::from_rows(&[&[0.6, 0.6], &[0.8, 0.8]]);
        let sigma = Sigma::identity(2);
        for _ in 0..20 {
            let y = sample_labels(&LabelSpec::Kgp(KernelSpec::Linear), &x, &sigma, &mut rng).unwrap();
            assert_eq!(y[0], y[1]);
        }
    }

    #[test]
    fn zero_covariate_gets_zero_relu_label() {
        let mut rng = Rng::new(5);
        let x = Mat::from_rows(&[&[0.0, 1.0], &[0.0, 2.0]]);
        let y = sample_labels(&LabelSpec::two_layer_default(2), &x, &Sigma::identity(2), &mut rng)
            .unwrap();
        assert_eq!(y[0], 0.0);
        assert!(sample_labels(&LabelSpec::TwoLayerRelu { hidden: 0 }, &x, &Sigma::identity(2), &mut rng)
            .is_err());
    }

    #[test]
    fn linear_kgp_on_sphere_has_unit_variance() {
        let mut rng = Rng::new(6);
        let sampler = PromptSampler { covariates: sphere(3), labels: LabelSpec::Kgp(KernelSpec::Linear), n: 2 };
        let draws = 100_000;
        let mut var = [0.0; 3];
        for _ in 0..draws {
            let p = sampler.sample(&mut rng).unwrap();
            for (v, y) in var.iter_mut().zip(&p.y) {
                *v += y * y / draws as f64;
            }
        }
        assert!(var.iter().all(|v| (0.97..=1.03).contains(v)), "{var:?}");
    }

    #[test]
    fn assemble_masks_query_label() {
        let x = Mat::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let p = assemble_prompt(x.clone(), vec![3.0, 4.0, 5.0]).unwrap();
        assert_eq!(p.z0.shape(), (3, 3));
        assert_eq!(p.z0.row(2), &[3.0, 4.0, 0.0]);
        assert_eq!(p.z0.row(0), x.row(0));
        assert_eq!(p.z0.row(1), x.row(1));
        assert_eq!(p.query_label(), 5.0);
        assert!(assemble_prompt(x, vec![1.0]).is_err());
    }

    #[test]
    fn batch_is_reproducible_and_replays() {
        let sampler = PromptSampler { covariates: sphere(3), labels: LabelSpec::Kgp(KernelSpec::EXP), n: 4 };
        let a = sampler.sample_batch(8, &Rng::new(10)).unwrap();
        let b = sampler.sample_batch(8, &Rng::new(10)).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        write_batch(&mut buf, &a).unwrap();
        let back = read_batch(buf.as_slice()).unwrap();
        assert_eq!(back, a);
        assert!(read_batch("nonsense\n".as_bytes()).is_err());
        assert!(read_batch(format!("{BATCH_MAGIC}\n1 1 0.5\n").as_bytes()).is_err());
    }

    #[test]
    fn covariate_kind_parsing() {
        assert_eq!("gmm".parse::<CovariateKind>().unwrap(), CovariateKind::GaussianMixture { num_clusters: 2 });
        assert_eq!("gmm(3)".parse::<CovariateKind>().unwrap(), CovariateKind::GaussianMixture { num_clusters: 3 });
        assert!("gmm(0)".parse::<CovariateKind>().is_err());
        for k in [CovariateKind::SphereIid, CovariateKind::GaussianIid, CovariateKind::GaussianMixture { num_clusters: 4 }] {
            assert_eq!(k.to_string().parse::<CovariateKind>().unwrap(), k);
        }
    }
}
