use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad classification used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-binary treatment at index {index}")]
    NonBinaryTreatment { index: usize },
    #[error("negative outcome at index {index}")]
    NegativeOutcome { index: usize },
    #[error("missing intercept column: x[{index}][0] is not 1")]
    MissingIntercept { index: usize },
    #[error("observed outcome disagrees with potential outcomes at index {index}")]
    InconsistentOutcome { index: usize },
    #[error("index {index} out of range for {len} units")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite rate at unit {index}: linear predictor {value}")]
    NonFiniteRate { index: usize, value: f64 },
    #[error("zero count at unit {index} under the error zero-count policy")]
    ZeroCount { index: usize },
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),
    #[error("zero predictive variance at unit {index}")]
    ZeroVariance { index: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("quadrature did not converge on [{a}, {b}] (error estimate {estimate:e})")]
    Quadrature { a: f64, b: f64, estimate: f64 },
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("at least {required} retained draws are required, got {got}")]
    InsufficientDraws { required: usize, got: usize },
    #[error("missing potential outcomes: the dataset carries no Y(0)/Y(1)")]
    MissingPotentialOutcomes,
    #[error(
        "no proposals accepted after adaptation (beta sd {sd_beta:e}, log-eps sd {sd_logeps:e})"
    )]
    NoAcceptance { sd_beta: f64, sd_logeps: f64 },
    #[error("deadline exceeded after {iterations} iterations")]
    Timeout { iterations: usize },
    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("missing column \"{0}\"")]
    MissingColumn(String),
    #[error("non-integer outcome row {row}")]
    NonIntegerOutcome { row: usize },
    #[error("row {row}, column \"{column}\": {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("value {value} at position {index} lies outside the binning rule")]
    OutOfRange { index: usize, value: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter(_) | Error::ModelMismatch(_) => ErrorKind::Usage,
            Error::NonFiniteRate { .. }
            | Error::NotSpd(_)
            | Error::ZeroVariance { .. }
            | Error::Quadrature { .. }
            | Error::NoAcceptance { .. }
            | Error::Timeout { .. }
            | Error::InsufficientDraws { .. } => ErrorKind::Numeric,
            Error::AtIteration { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Error {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
