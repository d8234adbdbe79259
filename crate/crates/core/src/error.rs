use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header field `{field}`: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("size mismatch: {0}")]
    Size(String),

    #[error("shape contract violated in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("unknown label value {value} ({count} voxels) for vocabulary {vocabulary}")]
    Vocabulary {
        vocabulary: &'static str,
        value: i64,
        count: usize,
    },

    #[error("no tumor voxels in reference mask")]
    NoTumor,

    #[error("invalid value for `{key}`: {value} (expected {expected})")]
    Invalid {
        key: String,
        value: String,
        expected: String,
    },

    #[error("requested region {detail} is outside the volume")]
    OutOfBounds { detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
