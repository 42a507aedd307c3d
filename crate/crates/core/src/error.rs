use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("tensor is not recorded on this tape")]
    DanglingReference,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("label {label} outside [0, {classes})")]
    Label { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("aggregate is empty")]
    EmptyAggregate,

    #[error("buffer partition for domain {0} is empty")]
    EmptyPartition(u32),

    #[error("variance undefined for batch of size {0}")]
    VarianceUndefined(usize),

    #[error("statistic kind {stat} does not match prior kind {prior}")]
    MethodMismatch { stat: &'static str, prior: &'static str },

    #[error("no prior stored for domain {0}")]
    MissingPrior(u32),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("training aborted at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
