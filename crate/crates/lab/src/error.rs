use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] stratdiff_core::Error),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        LabError::Format { path: path.into(), reason: reason.into() }
    }

    /// Short machine-readable tag used in structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Io { .. } => "io",
            LabError::Format { .. } => "format",
            LabError::Config(_) => "config",
            LabError::Core(stratdiff_core::Error::InvalidInput(_)) => "invalid-input",
            LabError::Core(stratdiff_core::Error::InvalidConfig(_)) => "invalid-config",
            LabError::Core(stratdiff_core::Error::Numerical(_)) => "numerical",
            LabError::Core(stratdiff_core::Error::EmptyBuffer) => "empty-buffer",
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
