use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Each variant maps onto one of the CLI exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ill-conditioned system ({context}): condition estimate {condition:.3e}")]
    IllConditioned { context: String, condition: f64 },

    #[error("internal consistency: {0}")]
    Internal(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// 0 ok, 1 I/O, 2 config/validation, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 1,
            Error::InvalidArgument(_) | Error::Config(_) | Error::Format { .. } => 2,
            Error::IllConditioned { .. } | Error::Numerical(_) | Error::Internal(_) => 3,
        }
    }

    /// Short machine-parseable category used as the error line prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::IllConditioned { .. } => "ill-conditioned",
            Error::Numerical(_) => "numerical",
            Error::Internal(_) => "internal",
        }
    }
}
