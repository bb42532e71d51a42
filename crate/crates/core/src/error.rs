//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape violation; `detail` names the offending dimension.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// A pixel byte outside the allowed label set, with its file offset.
    #[error("{path}: invalid label byte {byte} at offset {offset}")]
    LabelByte {
        path: PathBuf,
        byte: u8,
        offset: usize,
    },

    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("missing prediction maps for: {}", ids.join(", "))]
    MissingPredictions { ids: Vec<String> },

    #[error("non-finite loss in batch [{}]: {detail}", ids.join(", "))]
    NonFinite { ids: Vec<String>, detail: String },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
