//! Dense real matrices, symmetric eigendecomposition and a seeded PRNG.
//!
//! Everything here is sized for desk-scale problems (d ≤ 64, n ≤ 256), so the
//! routines are plain loops without blocking.

mod eig;
mod mat;
mod rng;

pub use eig::{random_orthogonal, spectral_norm, sym_eig, sym_sqrt_psd, SymEig, SYMMETRY_TOL};
pub use mat::{dot, Mat};
pub use rng::Rng;
