use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, symmetry, range).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue} below -{clamp}")]
    NotPsd { eigenvalue: f64, clamp: f64 },

    #[error("exp argument {argument} exceeds overflow guard")]
    Overflow { argument: f64 },

    #[error("linear system is singular (smallest regularized eigenvalue {eigenvalue})")]
    Singular { eigenvalue: f64 },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
