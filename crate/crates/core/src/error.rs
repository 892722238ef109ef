//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by dataset construction, training, and evaluation.
#[derive(Debug, Error)]
pub enum PlmError {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An argument is outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// A numeric invariant broke (NaN input, non-finite loss).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A configuration value is unusable.
    #[error("configuration error: {0}")]
    Config(String),
    /// A file did not match its expected binary or text format.
    #[error("format error: {0}")]
    Format(String),
    /// Training diverged or could not proceed.
    #[error("training error in stage '{stage}': {message}")]
    Train { stage: String, message: String },
    /// Evaluation could not be carried out.
    #[error("evaluation error: {0}")]
    Eval(String),
    /// Two artifacts cannot be compared.
    #[error("comparison error: {0}")]
    Comparison(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PlmError>;
