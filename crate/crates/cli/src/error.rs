use std::path::{Path, PathBuf};

use thiserror::Error;

pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_VALIDATION: i32 = 65;
pub const EXIT_IO: i32 = 74;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] seqload_core::Error),
    #[error("invalid arguments: {0}")]
    Usage(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::FileNotFound(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    pub fn parse(path: &Path, message: impl ToString) -> Self {
        CliError::Parse {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::FileNotFound(_) | CliError::Io { .. } => EXIT_IO,
            CliError::Parse { .. } | CliError::Core(_) | CliError::Usage(_) => EXIT_VALIDATION,
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
