use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("gate failure: {0}")]
    Gate(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(lsra_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// 0 success, 1 usage or config error, 2 gate failure, 3 numeric
    /// failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Gate(_) => 2,
            CliError::Numeric(_) | CliError::Core(lsra_core::Error::Numeric(_)) => 3,
            _ => 1,
        }
    }
}

impl From<lsra_core::Error> for CliError {
    fn from(e: lsra_core::Error) -> Self {
        match e {
            lsra_core::Error::Numeric(m) => CliError::Numeric(m),
            other => CliError::Core(other),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
