use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("invalid run spec: {0}")]
    Spec(String),
    #[error("validation failed: {0}")]
    Validation(#[source] panelkit::Error),
    #[error("model `{model}`: {source}")]
    Estimation {
        model: String,
        #[source]
        source: panelkit::Error,
    },
    #[error("diagnostics: {0}")]
    Diagnostics(#[source] panelkit::Error),
    #[error("{0}")]
    Threshold(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Self::Parse { path: path.into(), message: message.to_string() }
    }

    /// Process exit code: 2 validation, 3 estimation, 4 diagnostics threshold.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Estimation { .. } | Self::Diagnostics(_) => 3,
            Self::Threshold(_) => 4,
            _ => 2,
        }
    }
}
