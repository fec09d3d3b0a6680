use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {context} at time index {t}")]
    NonFinite { context: &'static str, t: usize },

    #[error(
        "non-finite gradient (epoch {epoch:?}, segment {segment}, component {component})"
    )]
    NonFiniteGradient {
        epoch: Option<usize>,
        segment: usize,
        component: usize,
    },

    #[error("power iteration did not converge after {iterations} iterations (estimate {estimate}, residual {residual:e})")]
    NoConvergence {
        iterations: usize,
        estimate: f64,
        residual: f64,
        iterate: Vec<f64>,
    },

    #[error("{what} index {index} out of range (valid: {valid})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        valid: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("{path}: non-numeric value {value:?} at row {row}, column {column:?}")]
    NonNumeric {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
