use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] tgc_tensor::TensorError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("corrupt record {path}: {msg}")]
    CorruptRecord { path: PathBuf, msg: String },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("degenerate attention: {0}")]
    DegenerateAttention(String),
    #[error("degenerate context: {0}")]
    DegenerateContext(String),
    #[error("contrastive pretraining needs batch size >= 2, got {0}")]
    ContrastiveDegenerate(usize),
    #[error("frozen-weight mutation detected: {0}")]
    FrozenMutation(String),
    #[error("non-finite loss at step {step} (batch sample seeds {seeds:?})")]
    NanLoss { step: usize, seeds: Vec<u64> },
    #[error("parameter accounting error: {0}")]
    Accounting(String),
    #[error("config error: {0}")]
    Config(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that indicate a broken invariant rather than bad input.
    pub fn is_invariant_breach(&self) -> bool {
        matches!(
            self,
            CoreError::FrozenMutation(_) | CoreError::Accounting(_) | CoreError::NanLoss { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
