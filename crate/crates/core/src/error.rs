use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("input contains no data rows")]
    EmptyInput,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A selection model or method was applied outside the setting it supports.
    #[error("out of scope: {0}")]
    Scope(String),

    #[error("calibration infeasible: required missing-data proportion {value} for level `{level}` is outside [0, 1]")]
    Infeasible { level: String, value: f64 },

    #[error("degenerate table: {0}")]
    Degenerate(String),

    #[error("possible separation in `{variable}`: |coefficient| = {magnitude:.3} exceeds 15")]
    Separation { variable: String, magnitude: f64 },

    #[error("model fit did not converge after {iterations} iterations (max |score| = {score_norm:e})")]
    NonConvergence { iterations: usize, score_norm: f64 },

    #[error("information matrix is singular or not positive definite ({0})")]
    Singular(String),

    #[error("covariance matrix is not positive semi-definite")]
    NotPsd,

    #[error("solver failed: {message} (residual trace: {trace:?})")]
    Solver { message: String, trace: Vec<f64> },

    #[error("imputation {index}: {source}")]
    Imputation {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{failed} of {total} repetitions failed, above the 1% cap")]
    FailureCap { failed: usize, total: usize },
}

/// Coarse error categories, used by front ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Schema(_)
            | Error::EmptyInput
            | Error::InvalidInput(_)
            | Error::Scope(_)
            | Error::Infeasible { .. }
            | Error::Degenerate(_) => ErrorClass::Data,
            Error::Separation { .. }
            | Error::NonConvergence { .. }
            | Error::Singular(_)
            | Error::NotPsd
            | Error::Solver { .. }
            | Error::FailureCap { .. } => ErrorClass::Numerical,
            Error::Imputation { source, .. } => source.class(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn in_imputation(self, index: usize) -> Self {
        Error::Imputation { index, source: Box::new(self) }
    }
}
