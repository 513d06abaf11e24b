use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::Mat;

/// Arguments above this are rejected by [`Activation::ExpDot`] instead of
/// overflowing.
pub const EXP_GUARD: f64 = 700.0;

/// Attention nonlinearity `ĥ(U, W)`, always a function of the scores `UᵀW`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    LinearDot,
    ReluDot,
    ExpDot,
    /// Column-wise softmax over the first `n` rows; the query row is zero.
    MaskedSoftmax,
}

impl Activation {
    pub const ALL: [Activation; 4] =
        [Activation::LinearDot, Activation::ReluDot, Activation::ExpDot, Activation::MaskedSoftmax];

    pub fn tag(&self) -> &'static str {
        match self {
            Activation::LinearDot => "linear",
            Activation::ReluDot => "relu",
            Activation::ExpDot => "exp",
            Activation::MaskedSoftmax => "softmax",
        }
    }

    pub(crate) fn code(&self) -> u8 {
        match self {
            Activation::LinearDot => 0,
            Activation::ReluDot => 1,
            Activation::ExpDot => 2,
            Activation::MaskedSoftmax => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Activation::ALL.get(code as usize).copied()
    }

    /// The activation whose entries equal `K(u_i, w_j)` under identity
    /// query/key weights, if `kernel` has one.
    pub fn matching(kernel: KernelSpec) -> Option<Activation> {
        match kernel {
            KernelSpec::Linear => Some(Activation::LinearDot),
            KernelSpec::Relu => Some(Activation::ReluDot),
            KernelSpec::Exp { .. } => Some(Activation::ExpDot),
        }
    }

    /// Applies the nonlinearity to a square score matrix `S = UᵀW`.
    ///
    /// Rows and columns index prompt positions; the last row is the query.
    pub fn apply_scores(&self, s: &Mat) -> Result<Mat> {
        let (rows, cols) = s.shape();
        match self {
            Activation::LinearDot => Ok(s.clone()),
            Activation::ReluDot => Ok(s.map(|v| v.max(0.0))),
            Activation::ExpDot => {
                if let Some(&bad) = s.as_slice().iter().find(|&&v| v > EXP_GUARD) {
                    return Err(Error::Overflow { argument: bad });
                }
                Ok(s.map(f64::exp))
            }
            Activation::MaskedSoftmax => {
                let mut out = Mat::zeros(rows, cols);
                let n = rows - 1;
                for j in 0..cols {
                    let max = (0..n).map(|i| s[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for i in 0..n {
                        let e = (s[(i, j)] - max).exp();
                        out[(i, j)] = e;
                        total += e;
                    }
                    for i in 0..n {
                        out[(i, j)] /= total;
                    }
                }
                Ok(out)
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.tag() == s.trim())
            .ok_or_else(|| contract(format!("unknown activation '{s}'")))
    }
}

/// `ĥ(U, W)` for `U, W` of shape `d × (n+1)`.
pub fn activation_apply(act: Activation, u: &Mat, w: &Mat) -> Result<Mat> {
    if u.shape() != w.shape() {
        return Err(contract(format!(
            "activation inputs {:?} and {:?} differ in shape",
            u.shape(),
            w.shape()
        )));
    }
    if u.cols() < 2 {
        return Err(contract("activation needs at least two columns"));
    }
    act.apply_scores(&u.t_matmul(w)?)
}
