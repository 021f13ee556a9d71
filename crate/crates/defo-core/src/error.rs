//! Crate-wide error type with a coarse kind used for process exit codes.

use thiserror::Error;

/// Broad failure class; the CLI maps these to exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid configuration or invalid arguments.
    Config,
    /// Bad or inconsistent data / artifact files.
    Data,
    /// Numeric failure: shape mismatch, non-finite values, failed check.
    Numeric,
    /// Filesystem / IO failure.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate vector: l2 norm {norm:e} is below {min:e}")]
    DegenerateVector { norm: f64, min: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration invalid:\n{}", violations.join("\n"))]
    Config { violations: Vec<String> },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: corrupt file: {reason}")]
    Corrupt { path: String, reason: String },

    #[error("{path}: format mismatch: found magic {found:?}, expected {expected:?}")]
    FormatMismatch {
        path: String,
        found: String,
        expected: String,
    },

    #[error("{path}: checksum mismatch")]
    Checksum { path: String },

    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(violations: Vec<String>) -> Self {
        Error::Config { violations }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::InvalidInput(_) => ErrorKind::Config,
            Error::Data(_)
            | Error::Corrupt { .. }
            | Error::FormatMismatch { .. }
            | Error::Checksum { .. }
            | Error::TensorShape { .. }
            | Error::LabelOutOfRange { .. } => ErrorKind::Data,
            Error::DimensionMismatch { .. }
            | Error::DegenerateVector { .. }
            | Error::NonScalarRoot { .. }
            | Error::NonFinite { .. } => ErrorKind::Numeric,
            Error::Io { .. } => ErrorKind::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
