use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch: {left} vs {right}")]
    GridMismatch { left: String, right: String },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("non-finite sample coordinate {0:?}")]
    NonFiniteCoordinate([f64; 3]),
    #[error("mask is empty")]
    EmptyMask,
    #[error("intensity variance is zero inside the mask")]
    ZeroVariance,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("inconsistent pipeline state: {0}")]
    InconsistentState(String),
    #[error("numerical abort at iteration {iteration}: {term} is not finite")]
    NumericalAbort { iteration: usize, term: &'static str },
    #[error("ground-truth deformation rejected: {0}")]
    Deformation(String),
    #[error("tumor {index} does not lie inside the liver mask")]
    TumorOutsideLiver { index: usize },
    #[error("slice index {index} out of range for axis of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{path}: bad magic, not a single-file NIfTI-1 volume")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported datatype code {code}")]
    UnsupportedDatatype { path: PathBuf, code: i16 },
    #[error("{path}: payload size mismatch (expected {expected} bytes, found {actual})")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: unsupported file: {reason}")]
    UnsupportedFile { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NumericalAbort { .. } => ErrorClass::Numerical,
            Error::InvalidConfig(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
