use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("IoU is undefined for two empty pixel sets")]
    UndefinedIou,

    #[error("insufficient tissue: {found} pixels survive the OD threshold, {required} required")]
    InsufficientTissue { found: usize, required: usize },

    #[error("degenerate stain estimate: {0}")]
    DegenerateStain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range in {what}: {value}")]
    Range { what: &'static str, value: u64 },

    #[error("unsupported PNG layout in {path}: expected {expected}, found {found}")]
    PngFormat {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
