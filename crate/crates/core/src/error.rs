use std::fmt;

use thiserror::Error;

/// A structural parse failure. `position` is a byte offset into the
/// whitespace-normalized input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormatError {
    pub position: usize,
    pub reason: String,
}

impl FormatError {
    pub fn new(position: usize, reason: impl Into<String>) -> Self {
        FormatError {
            position,
            reason: reason.into(),
        }
    }
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "format error at byte {}: {}", self.position, self.reason)
    }
}

impl std::error::Error for FormatError {}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape")]
    DoubleBackward,
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SeqTooLong { len: usize, max_len: usize },
    #[error("style-encoding input lacks the [STYLE] token")]
    MissingStyleToken,
    #[error("text has {0} usable tokens, at least 3 are required")]
    TooShort(usize),
    #[error("need at least {needed} items, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("hypothesis/reference count mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite loss component `{component}` at step {step}")]
    NonFinite { component: String, step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
