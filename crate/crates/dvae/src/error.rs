use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how the CLI maps them to exit codes: anything a
/// user can fix by editing a config or input file is a validation failure
/// (exit 1), anything that went wrong mid-computation is a numeric failure
/// (exit 2).
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    #[error("shape error in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input outside an operation's domain (log/sqrt of a non-positive
    /// value, division by zero).
    #[error("domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },

    /// An operation produced NaN or Inf.
    #[error("non-finite result in `{op}`")]
    NonFinite { op: &'static str },

    /// A distribution, model, or objective was constructed with invalid
    /// parameters.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// Pieces that cannot be combined (objective/prior mismatch, posterior
    /// and prior dimensions, ...).
    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    /// A numeric procedure failed to deliver (quadrature did not converge,
    /// divergent normalizer, underflowed estimator, non-finite gradients).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed file content (NPY/IDX/checkpoint/CSV).
    #[error("format error: {0}")]
    Format(String),

    /// Bad experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. }
            | Error::InvalidSpec(_)
            | Error::Incompatible(_)
            | Error::Format(_)
            | Error::Config(_)
            | Error::Io { .. } => 1,
            Error::Domain { .. } | Error::NonFinite { .. } | Error::Numeric(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
