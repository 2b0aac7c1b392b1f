use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SvaeError>;

#[derive(Debug, Error)]
pub enum SvaeError {
    /// Shape disagreement on a named axis.
    #[error("dimension mismatch in {op}: {axis} expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },

    /// A caller-side precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN / infinity where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed input bytes.
    #[error("format error in {source_name} at byte {offset}: {message}")]
    Format {
        source_name: String,
        offset: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl SvaeError {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        SvaeError::Dimension {
            op,
            axis: axis.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        SvaeError::Contract(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        SvaeError::Numeric(msg.into())
    }

    pub(crate) fn format(source_name: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        SvaeError::Format {
            source_name: source_name.into(),
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SvaeError::Io {
            path: path.into(),
            source,
        }
    }
}
