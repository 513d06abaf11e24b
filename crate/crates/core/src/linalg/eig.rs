use super::{Mat, Rng};
use crate::error::{contract, Error, Result};

/// Symmetry tolerance (relative to `1 + max|entry|`) accepted by the
/// symmetric routines.
pub const SYMMETRY_TOL: f64 = 1e-12;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigendecomposition `m = vectors · diag(values) · vectorsᵀ`, values descending.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub vectors: Mat,
    pub values: Vec<f64>,
}

impl SymEig {
    /// `vectors · diag(f(values)) · vectorsᵀ`.
    pub fn reassemble(&self, f: impl Fn(f64) -> f64) -> Mat {
        let n = self.values.len();
        let mapped: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for (k, &lam) in mapped.iter().enumerate() {
                    acc += self.vectors[(i, k)] * lam * self.vectors[(j, k)];
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }

    pub fn max_abs_value(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn check_symmetric(m: &Mat, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(contract(format!("{what}: matrix is {:?}, not square", m.shape())));
    }
    if !m.is_finite() {
        return Err(contract(format!("{what}: non-finite entries")));
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(contract(format!("{what}: asymmetry {asym:e} exceeds {SYMMETRY_TOL:e}")));
    }
    Ok(())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps over all (p, q) pairs until the off-diagonal Frobenius norm falls
/// below `1e-12 · ‖m‖_F`, capped at 100 sweeps.
pub fn sym_eig(m: &Mat) -> Result<SymEig> {
    check_symmetric(m, "sym_eig")?;
    let n = m.rows();
    let mut a = Mat::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let mut v = Mat::identity(n);
    let scale = a.frobenius();
    let target = JACOBI_TOL * scale;

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) <= target {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s, t);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig { vectors, values })
}

fn off_diagonal_norm(a: &Mat) -> f64 {
    let n = a.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

// Annihilates a[p][q] with the plane rotation (c, s), t = s / c.
fn rotate(a: &mut Mat, v: &mut Mat, p: usize, q: usize, c: f64, s: f64, t: f64) {
    let n = a.rows();
    let apq = a[(p, q)];
    a[(p, p)] -= t * apq;
    a[(q, q)] += t * apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for r in 0..n {
        if r != p && r != q {
            let arp = a[(r, p)];
            let arq = a[(r, q)];
            let new_p = c * arp - s * arq;
            let new_q = s * arp + c * arq;
            a[(r, p)] = new_p;
            a[(p, r)] = new_p;
            a[(r, q)] = new_q;
            a[(q, r)] = new_q;
        }
        let vrp = v[(r, p)];
        let vrq = v[(r, q)];
        v[(r, p)] = c * vrp - s * vrq;
        v[(r, q)] = s * vrp + c * vrq;
    }
}

/// Symmetric square root of a PSD matrix; eigenvalues in `[-clamp, clamp)` are
/// treated as zero.
pub fn sym_sqrt_psd(m: &Mat, clamp: f64) -> Result<Mat> {
    let eig = sym_eig(m)?;
    if let Some(&worst) = eig.values.iter().find(|&&v| v < -clamp) {
        return Err(Error::NotPsd { eigenvalue: worst, clamp });
    }
    Ok(eig.reassemble(|v| if v < clamp { 0.0 } else { v.sqrt() }))
}

/// Haar-distributed orthogonal matrix: Gaussian matrix, Gram–Schmidt with a
/// second reorthogonalization pass, column signs fixed so that diag(R) > 0.
pub fn random_orthogonal(d: usize, rng: &mut Rng) -> Result<Mat> {
    if d == 0 {
        return Err(contract("random_orthogonal: d must be at least 1"));
    }
    let g = Mat::from_fn(d, d, |_, _| rng.normal());
    let mut q = Mat::zeros(d, d);
    for j in 0..d {
        let mut col = g.col(j);
        let original = col.clone();
        for _pass in 0..2 {
            for k in 0..j {
                let qk = q.col(k);
                let proj: f64 = qk.iter().zip(&col).map(|(a, b)| a * b).sum();
                for (c, qv) in col.iter_mut().zip(&qk) {
                    *c -= proj * qv;
                }
            }
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        // R_jj = <q_j, g_j>; flip so it is positive.
        let rjj: f64 = col.iter().zip(&original).map(|(a, b)| a * b).sum::<f64>() / norm;
        let sign = if rjj < 0.0 { -1.0 } else { 1.0 };
        for c in col.iter_mut() {
            *c *= sign / norm;
        }
        q.set_col(j, &col);
    }
    Ok(q)
}

/// Largest |eigenvalue| of a symmetric matrix.
pub fn spectral_norm(m: &Mat) -> Result<f64> {
    Ok(sym_eig(m)?.max_abs_value())
}
