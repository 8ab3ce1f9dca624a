use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the workbench.
///
/// Variants are split by whether the caller handed us bad configuration
/// (`Config`, `Geometry`, ...) or the data itself is broken (`Data`, `Io`).
/// The CLI maps the first group to exit code 2 and the second to 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("geometry mismatch: {left} vs {right}")]
    GeometryMismatch { left: String, right: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid heatmap: {0}")]
    InvalidHeatmap(String),

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("unknown world preset `{0}` (expected room, corridor or office)")]
    UnknownPreset(String),

    #[error("trajectory leaves world bounds at frame {frame}")]
    OutOfBounds { frame: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("dataset error in {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },

    #[error("non-finite value in frame {frame}")]
    NonFiniteFrame { frame: usize },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True when the error stems from the data being processed rather than
    /// from the configuration that was supplied.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Dataset { .. }
                | Error::NonFiniteFrame { .. }
                | Error::NonFiniteLoss(_)
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Insufficient(_)
                | Error::Undefined(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
