use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label out of range: {label} >= {classes} (at index {index})")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("zero-norm row {0}")]
    ZeroRow(usize),

    #[error("class {class} has {available} samples, needs {required}")]
    InsufficientSamples { class: usize, available: usize, required: usize },

    #[error("missing field: {0}")]
    MissingField(String),

    #[error("not a probability distribution: row {row} ({detail})")]
    NotADistribution { row: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at batch {batch}: {detail}")]
    NonFiniteLoss { batch: usize, detail: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
