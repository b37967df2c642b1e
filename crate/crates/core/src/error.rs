use std::path::PathBuf;

use thiserror::Error;

/// Process exit code for invalid configuration or arguments.
pub const EXIT_CONFIG: u8 = 2;
/// Process exit code for unreadable, missing or malformed inputs.
pub const EXIT_IO: u8 = 3;
/// Process exit code for numeric failures.
pub const EXIT_NUMERIC: u8 = 4;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("video has no segments")]
    EmptyVideo,

    #[error("video with {0} segment(s) cannot be aggregated (need at least 2)")]
    DegenerateVideo(usize),

    #[error("finite-difference oracle failed: {0}")]
    OracleFailure(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: format error at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown class name(s): {}", .0.join(", "))]
    UnknownClasses(Vec<String>),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) | Error::UnknownClasses(_) => EXIT_CONFIG,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Parse { .. }
            | Error::Shape(_)
            | Error::EmptyVideo
            | Error::DegenerateVideo(_) => EXIT_IO,
            Error::NonFinite(_) | Error::OracleFailure(_) => EXIT_NUMERIC,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
