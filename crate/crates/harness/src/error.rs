use std::path::PathBuf;

use rpim_core::RpimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("run `{run}` failed: {source}")]
    Run {
        run: String,
        #[source]
        source: RpimError,
    },

    #[error(transparent)]
    Core(#[from] RpimError),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json encoding failed: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 configuration, 2 numeric failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        let core = match self {
            HarnessError::Config(_) => return 1,
            HarnessError::Io { .. } | HarnessError::Json(_) => return 3,
            HarnessError::Run { source, .. } => source,
            HarnessError::Core(source) => source,
        };
        match core {
            RpimError::Io(_) | RpimError::Parse { .. } => 3,
            e if e.is_numeric() => 2,
            _ => 1,
        }
    }
}
