use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("index {index} out of range for {what} (size {size})")]
    Index { what: String, index: usize, size: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },

    #[error("checksum mismatch: expected {expected:016x}, found {found:016x}")]
    Checksum { expected: u64, found: u64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
