use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ArdError>;

#[derive(Debug, Error)]
pub enum ArdError {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },

    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("model variant mismatch: operation expects {expected}, state is {found}")]
    VariantMismatch { expected: String, found: String },

    #[error("unsupported format version: file has {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },

    #[error("{path}: {message} (at {location})")]
    Format {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ArdError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ArdError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        ArdError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input (configuration, file contents,
    /// shapes) as opposed to failures during a run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            ArdError::Config { .. }
                | ArdError::Precondition(_)
                | ArdError::Version { .. }
                | ArdError::Format { .. }
                | ArdError::Dimension { .. }
                | ArdError::Shape { .. }
        ) || matches!(self, ArdError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
