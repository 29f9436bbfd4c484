use thiserror::Error;

use crate::tagging::CodecError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Codec(#[from] CodecError),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("model dimension {dim} is not divisible by head count {heads}")]
    HeadSplit { dim: usize, heads: usize },

    #[error("token {token} has no sub-tokens in the backend alignment")]
    Alignment { token: usize },

    #[error("span width {width} exceeds the maximum width {max_width}")]
    WidthOverflow { width: usize, max_width: usize },

    #[error("span [{start}, {end}) is not a non-empty span of a {len}-token sentence")]
    SpanBounds { start: usize, end: usize, len: usize },

    #[error("unknown {kind} label `{label}`")]
    UnknownLabel { kind: &'static str, label: String },

    #[error("label index {index} out of range for vocabulary of size {size}")]
    LabelIndex { index: usize, size: usize },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("record {record}: {message}")]
    Validation { record: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("sentence ids differ between gold and predictions: {0}")]
    SentenceMismatch(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
