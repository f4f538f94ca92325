//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the meta-learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Instance or representation dimensions are inconsistent (e.g. k > d).
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    /// A sample count or budget is out of range (e.g. n < 1).
    #[error("invalid size: {0}")]
    InvalidSize(String),

    /// A train/validation split request is impossible (n1 < 1 or n1 ≥ n).
    #[error("invalid split: n1={n1}, n={n}")]
    InvalidSplit { n1: usize, n: usize },

    /// Operands with incompatible shapes were combined.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A split's sizes do not match the declared SplitSpec.
    #[error("split size mismatch: {0}")]
    SplitSizeMismatch(String),

    /// A scalar parameter is outside its admissible range (e.g. λ < 0).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A closed-form value was requested inside its divergent regime.
    #[error("divergent regime: {0}")]
    DivergentRegime(String),

    /// The outer optimization produced a non-finite objective or iterate.
    #[error("optimization diverged at step {step}: {what}")]
    OptimizationDiverged { step: usize, what: String },

    /// An SVD or linear solve failed to converge on pathological input.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Experiment configuration is invalid (schema, unknown keys, bad values).
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
