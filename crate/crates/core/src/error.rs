//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    Config(String),

    #[error("tensor `{name}`: missing from container")]
    MissingTensor { name: String },

    #[error("tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{name}`: non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("tensor `{name}`: unsupported dtype {dtype}")]
    Dtype { name: String, dtype: String },

    #[error("tensor container: {0}")]
    Container(String),

    #[error("token id {id} at position {position} is out of range for vocab size {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("hook: {0}")]
    Hook(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("trace: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("trace: unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("trace: truncated ({0})")]
    Truncated(String),

    #[error("trace: header/payload mismatch ({0})")]
    PayloadMismatch(String),

    #[error("trace: {0}")]
    Trace(String),

    #[error("selector {selector} out of range for sequence `{sequence_id}` (length {len})")]
    SelectorOutOfRange {
        selector: String,
        sequence_id: String,
        len: usize,
    },

    #[error("intervention: {0}")]
    Intervention(String),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("months task: {0}")]
    Months(String),

    #[error("empty prediction group for month {month}")]
    EmptyPredictionGroup { month: String },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
