use std::path::PathBuf;

use diffnca_core::Error as CoreError;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {detail}", path.display())]
    Image { path: PathBuf, detail: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dataset: {0}")]
    Dataset(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 configuration, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                CoreError::NumericFailure { .. } | CoreError::NonFiniteLoss { .. } => 3,
                _ => 2,
            },
            CliError::Io { .. } | CliError::Image { .. } | CliError::Checkpoint(_) | CliError::Dataset(_) => 4,
        }
    }
}
