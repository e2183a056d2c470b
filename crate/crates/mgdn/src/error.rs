use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum MgdnError {
    /// Incompatible tensor shapes fed to an operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Violated operation contract (non-scalar loss, wrong arity, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed file contents (checkpoint, raster, manifest).
    #[error("format error: {0}")]
    Format(String),

    /// Filesystem failure, annotated with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl MgdnError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MgdnError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MgdnError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MgdnError>;
