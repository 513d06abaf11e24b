//! Nonlinear-attention transformers for in-context learning, the weight
//! construction under which they run functional gradient descent in an RKHS,
//! independent oracles for that descent and for the Bayes predictor, and a
//! training driver for the learned stationary points.

pub mod config;
pub mod data;
pub mod error;
pub mod funcgd;
pub mod kernels;
pub mod linalg;
pub mod train;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
