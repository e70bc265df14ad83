use thiserror::Error;

use crate::model::Theta;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("repeated risk minimization is not a contraction: eps_bar * L / mu = {ratio}")]
    NonContraction { ratio: f64 },

    /// `mu_tilde = mu - (1 + delta) * eps_bar * L` must be positive for the
    /// convergence constants to exist.
    #[error("non-contractive regime: mu_tilde = {mu_tilde} <= 0")]
    NonContractiveRegime { mu_tilde: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence {
        iterations: usize,
        residual: f64,
        last: Theta,
    },

    #[error("non-finite value produced at step {step}")]
    NonFinite { step: u64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("ingestion error at line {line}: {message}")]
    Ingestion { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
