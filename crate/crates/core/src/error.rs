use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// Variants are grouped by [`ErrorClass`] so command-line front ends can map
/// them onto stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("consistency error in batch '{batch}': {msg}")]
    Consistency { batch: String, msg: String },

    #[error("validation error in batch '{batch}', row {row}: {msg}")]
    Validation {
        batch: String,
        row: usize,
        msg: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive definite even with jitter {jitter:e}")]
    Conditioning { jitter: f64 },

    #[error("no convergence after {iterations} iterations (last gradient norm {grad_norm:e})")]
    Convergence { iterations: usize, grad_norm: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported model file version '{found}' (expected '{expected}')")]
    Version { found: String, expected: String },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("fit failed: {0}")]
    FitFailed(String),
}

/// Coarse classification of [`Error`] values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Validation,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io(_) => ErrorClass::Io,
            Error::Schema(_)
            | Error::Consistency { .. }
            | Error::Validation { .. }
            | Error::Dimension(_)
            | Error::InvalidParameter(_)
            | Error::Parse { .. }
            | Error::Version { .. } => ErrorClass::Validation,
            Error::Conditioning { .. }
            | Error::Convergence { .. }
            | Error::UndefinedCorrelation(_)
            | Error::FitFailed(_) => ErrorClass::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
