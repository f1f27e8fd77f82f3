use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SkdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SkdError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error(transparent)]
    Core(#[from] skd_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl SkdError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    /// Process exit status: 1 check failure, 2 usage or input, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::CheckFailed(_) => 1,
            Self::Diverged(_) => 3,
            _ => 2,
        }
    }
}
