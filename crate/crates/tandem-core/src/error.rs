//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    ShapeMismatch {
        expected: String,
        got: String,
        context: &'static str,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("empty attention set for query {query}")]
    EmptyAttentionSet { query: usize },
    #[error("kv cache full (capacity {capacity})")]
    CacheFull { capacity: usize },
    #[error("sequence length {len} exceeds max context {max_context}")]
    ContextOverflow { len: usize, max_context: usize },
    #[error("token id {id} out of vocab range {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("invalid temperature {0} (must be > 0)")]
    InvalidTemperature(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParameter(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("distribution not normalized (sum {sum})")]
    NotNormalized { sum: f64 },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint version {got} unsupported (expected {expected})")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(expected: impl Into<String>, got: impl Into<String>, context: &'static str) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
            context,
        }
    }
}
