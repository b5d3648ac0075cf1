use thiserror::Error;

/// Errors raised by tensor construction, graph ops, and checkpoint I/O.
#[derive(Error, Debug)]
pub enum TensorError {
    #[error("shape mismatch: {op} got {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dimension error in {op}: {msg} (shape {shape:?})")]
    Dimension {
        op: &'static str,
        msg: String,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?} (numel {numel})")]
    DataLength {
        len: usize,
        shape: Vec<usize>,
        numel: usize,
    },
    #[error("{op} expects a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("empty grid: {op} requires spatial dims >= 1, got {shape:?}")]
    EmptyGrid { op: &'static str, shape: Vec<usize> },
    #[error("vocabulary error: token id {id} out of range for table with {vocab} rows")]
    Vocabulary { id: usize, vocab: usize },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
