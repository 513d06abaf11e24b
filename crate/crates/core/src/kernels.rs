//! Label-generating kernels, Gram matrices, the |eigenvalue| operator and
//! Gaussian-process label sampling.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::linalg::{dot, sym_eig, Mat, Rng, SYMMETRY_TOL};

/// The closed set of similarity functions used to generate labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelSpec {
    /// `⟨u, w⟩`
    Linear,
    /// `max(0, ⟨u, w⟩)`; symmetric but not PSD.
    Relu,
    /// `exp(sign · ⟨u, w⟩ / sigma²)`
    Exp { sigma: f64, sign: f64 },
}

impl KernelSpec {
    /// `exp(⟨u, w⟩)`, the setting used by all experiments.
    pub const EXP: KernelSpec = KernelSpec::Exp { sigma: 1.0, sign: 1.0 };

    pub fn exp(sigma: f64, sign: f64) -> Result<Self> {
        let k = KernelSpec::Exp { sigma, sign };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if let KernelSpec::Exp { sigma, sign } = *self {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(contract(format!("exp kernel sigma must be positive, got {sigma}")));
            }
            if sign != 1.0 && sign != -1.0 {
                return Err(contract(format!("exp kernel sign must be +1 or -1, got {sign}")));
            }
        }
        Ok(())
    }

    /// Whether every Gram matrix of this kernel is PSD.
    pub fn is_psd(&self) -> bool {
        !matches!(self, KernelSpec::Relu)
    }

    #[inline]
    pub fn from_inner(&self, inner: f64) -> f64 {
        match *self {
            KernelSpec::Linear => inner,
            KernelSpec::Relu => inner.max(0.0),
            KernelSpec::Exp { sigma, sign } => (sign * inner / (sigma * sigma)).exp(),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            KernelSpec::Linear => "linear",
            KernelSpec::Relu => "relu",
            KernelSpec::Exp { .. } => "exp",
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            KernelSpec::Exp { sigma, sign } if sigma != 1.0 || sign != 1.0 => {
                write!(f, "exp({sigma},{sign})")
            }
            k => f.write_str(k.tag()),
        }
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    /// Accepts `linear`, `relu`, `exp`, or `exp(sigma,sign)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "linear" => Ok(KernelSpec::Linear),
            "relu" => Ok(KernelSpec::Relu),
            "exp" => Ok(KernelSpec::EXP),
            _ => {
                let inner = s
                    .strip_prefix("exp(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| contract(format!("unknown kernel '{s}'")))?;
                let (sigma, sign) = inner
                    .split_once(',')
                    .ok_or_else(|| contract(format!("expected exp(sigma,sign), got '{s}'")))?;
                let parse = |v: &str| {
                    v.trim().parse::<f64>().map_err(|_| contract(format!("bad number '{v}'")))
                };
                KernelSpec::exp(parse(sigma)?, parse(sign)?)
            }
        }
    }
}

pub fn kernel_eval(spec: KernelSpec, u: &[f64], w: &[f64]) -> Result<f64> {
    if u.len() != w.len() {
        return Err(contract(format!("kernel inputs of length {} and {}", u.len(), w.len())));
    }
    Ok(spec.from_inner(dot(u, w)))
}

/// Gram matrix of the columns of some `X`, with provenance.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub m: Mat,
    pub spec: KernelSpec,
    pub preconditioned: bool,
}

/// `[K]_{ij} = K(P x_i, P x_j)` over the columns of `x`, where `P` is
/// `sigma_inv_sqrt` when given and the identity otherwise.
pub fn kernel_matrix(spec: KernelSpec, x: &Mat, sigma_inv_sqrt: Option<&Mat>) -> Result<GramMatrix> {
    spec.validate()?;
    let inputs = match sigma_inv_sqrt {
        Some(p) => {
            if p.shape() != (x.rows(), x.rows()) {
                return Err(contract(format!(
                    "preconditioner {:?} does not match covariate dimension {}",
                    p.shape(),
                    x.rows()
                )));
            }
            p.matmul(x)?
        }
        None => x.clone(),
    };
    let cols: Vec<Vec<f64>> = (0..inputs.cols()).map(|j| inputs.col(j)).collect();
    let n = cols.len();
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = spec.from_inner(dot(&cols[i], &cols[j]));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(GramMatrix { m, spec, preconditioned: sigma_inv_sqrt.is_some() })
}

/// `U |D| Uᵀ` for the eigendecomposition `U D Uᵀ` of the Gram matrix.
pub fn kmat_plus(g: &GramMatrix) -> Result<Mat> {
    abs_eigen(&g.m)
}

/// [`kmat_plus`] on a bare symmetric matrix.
pub fn abs_eigen(m: &Mat) -> Result<Mat> {
    Ok(sym_eig(m)?.reassemble(f64::abs))
}

/// Draws `Y = S ξ` with `S` the symmetric square root of `kplus` and `ξ`
/// standard normal. Eigenvalues within `1e-10 · max|λ|` of zero are zeroed.
pub fn sample_gp_labels(kplus: &Mat, rng: &mut Rng) -> Result<Vec<f64>> {
    let eig = sym_eig(kplus)?;
    let clamp = 1e-10 * eig.max_abs_value();
    if let Some(&worst) = eig.values.iter().find(|&&v| v < -clamp) {
        return Err(Error::NotPsd { eigenvalue: worst, clamp });
    }
    let s = eig.reassemble(|v| if v <= clamp { 0.0 } else { v.sqrt() });
    let xi = rng.normals(kplus.rows());
    s.matvec(&xi)
}

/// Same draw as `sample_gp_labels(&kmat_plus(gram), rng)` (the symmetric
/// square root of `Kmat_+` is unique), from a single Householder/QL
/// eigendecomposition. Used for bulk prompt generation.
pub fn sample_kgp_from_gram(gram: &Mat, rng: &mut Rng) -> Result<Vec<f64>> {
    let n = gram.rows();
    if !gram.is_square() || !gram.is_symmetric(SYMMETRY_TOL) {
        return Err(contract("Gram matrix must be square and symmetric"));
    }
    let eig = nalgebra::DMatrix::from_row_slice(n, n, gram.as_slice()).symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let clamp = 1e-10 * top;
    let xi = nalgebra::DVector::from_vec(rng.normals(n));
    let mut w = eig.eigenvectors.tr_mul(&xi);
    for (wi, &l) in w.iter_mut().zip(eig.eigenvalues.iter()) {
        *wi *= if l.abs() <= clamp { 0.0 } else { l.abs().sqrt() };
    }
    Ok((&eig.eigenvectors * w).iter().copied().collect())
}
