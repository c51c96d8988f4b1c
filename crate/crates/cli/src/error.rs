use miga::MigaError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Miga(#[from] MigaError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradcheckFailed(Vec<String>),
}

impl CliError {
    /// 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Write { .. } => 2,
            CliError::GradcheckFailed(_) => 3,
            CliError::Miga(e) => match e {
                MigaError::Config(_) => 1,
                MigaError::Data(_)
                | MigaError::Parse { .. }
                | MigaError::InsufficientHistory { .. }
                | MigaError::Incompatible(_)
                | MigaError::Io(_) => 2,
                MigaError::Numerical(_) | MigaError::Tensor(_) => 3,
            },
        }
    }
}
