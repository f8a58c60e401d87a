use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("label error at row {row}: label {label} outside [0, {classes})")]
    Label { row: usize, label: i64, classes: usize },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("autodiff contract violated: {0}")]
    Contract(String),

    #[error("tape already consumed by a backward pass; run a new forward pass")]
    TapeReuse,

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("every task is absent from the batch")]
    EmptyBatch,

    #[error("split error: {0}")]
    Split(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 1 usage/config, 2 data/format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Precondition(_) => 1,
            Error::NonFinite(_) | Error::Contract(_) | Error::TapeReuse => 3,
            _ => 2,
        }
    }
}
