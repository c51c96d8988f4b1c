use miga_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, MigaError>;

#[derive(Debug, Error)]
pub enum MigaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("day {day} has {available} prior days, window needs {needed}")]
    InsufficientHistory {
        day: String,
        needed: usize,
        available: usize,
    },
    #[error("incompatible: {0}")]
    Incompatible(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MigaError {
    pub fn config(msg: impl Into<String>) -> Self {
        MigaError::Config(vec![msg.into()])
    }
}
