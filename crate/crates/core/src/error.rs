use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// Variants are grouped so that a command-line front end can map them onto
/// exit codes: [`Error::is_data_error`] and [`Error::is_divergence`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("parameter set is frozen; refusing to update")]
    Frozen,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged in {stage} at epoch {epoch}, batch {batch}: non-finite loss")]
    Divergence { stage: String, epoch: usize, batch: usize },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("frozen predictor parameter `{0}` changed during training")]
    FreezeViolation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Errors caused by missing or malformed inputs rather than by the code.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Data(_) | Error::Checkpoint { .. } | Error::MissingFile(_) | Error::Io { .. }
        )
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
