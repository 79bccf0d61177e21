use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Model(#[from] specbatch_core::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for invariant
    /// violations detected during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io { .. } | HarnessError::Format { .. } => 2,
            HarnessError::Invariant(_) => 3,
            HarnessError::Model(specbatch_core::Error::Contract(_)) => 3,
            HarnessError::Model(_) => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        HarnessError::Format { path: path.into(), message: message.to_string() }
    }
}
