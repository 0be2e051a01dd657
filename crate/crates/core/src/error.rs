use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by front-ends to pick an exit status.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Validation,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("no sequences")]
    NoSequences,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("record {index}: {message}")]
    InvalidRecord { index: usize, message: String },

    #[error("duplicate run key {0}")]
    DuplicateRun(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("underdetermined problem: {residuals} residuals for {free} free parameters")]
    Underdetermined { residuals: usize, free: usize },

    #[error("degenerate sequence: ApEn ≈ 0, ApEn′ undefined (ApEn = {apen:e}, epsilon = {epsilon:e})")]
    DegenerateApEn { apen: f64, epsilon: f64 },

    #[error("stationary distribution not unique: {0}")]
    NotErgodic(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    #[error("archive locked: {0}")]
    Locked(PathBuf),

    #[error("digest mismatch for {path}: manifest {expected}, file {actual}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } | Error::Locked(_) => ErrorClass::Io,
            Error::DegenerateApEn { .. } | Error::NotErgodic(_) | Error::NonFinite(_) => {
                ErrorClass::Numeric
            }
            _ => ErrorClass::Validation,
        }
    }
}
