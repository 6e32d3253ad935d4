use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AatError>;

#[derive(Debug, Error)]
pub enum AatError {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite activation at layer {layer}, head {head:?}")]
    NonFiniteActivation { layer: usize, head: Option<usize> },

    #[error("invalid attention matrix: {0}")]
    InvalidAttention(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid ablation config: {0}")]
    InvalidConfig(String),

    #[error("gradient tape: {0}")]
    Tape(&'static str),

    #[error("index {index} out of range for {what} of size {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("corrupt manifest {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },

    #[error("truncated blob {path}: tensor {name} needs bytes {end}, blob has {len}")]
    TruncatedBlob {
        path: PathBuf,
        name: String,
        end: u64,
        len: u64,
    },

    #[error("shape mismatch for tensor {name}: {reason}")]
    ShapeMismatch { name: String, reason: String },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged {
        epoch: usize,
        last_good: Box<crate::bp::GatingParams>,
    },

    #[error("benchmark rejected seed {seed}: planted ablation gained {gain:.2} mean-R points (< {required:.1})")]
    BenchRejected {
        seed: u64,
        gain: f64,
        required: f64,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AatError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        AatError::DimensionMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
