use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index {index} out of range for {len} entries")]
    Index { index: usize, len: usize },

    /// Inconsistent configuration or a violated precondition on a parameter.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An input that leaves nothing to work on, e.g. an all-zero channel mask.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: String },

    #[error("truncated input while reading {0}")]
    Truncated(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: u32 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("tensor count mismatch: header declares {expected}, file holds {found}")]
    TensorCount { expected: usize, found: usize },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Index { .. } => "index",
            Error::Config(_) => "config",
            Error::Degenerate(_) => "degenerate",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated(_) => "truncated",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::Version { .. } => "version",
            Error::TensorCount { .. } => "tensor_count",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
