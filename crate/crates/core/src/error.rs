use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments that break its contract
    /// (mismatched shapes, wrong channel counts, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value makes the requested computation impossible.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint: bad magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint: unsupported version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },

    #[error("checkpoint: truncated ({0})")]
    Truncated(String),

    #[error("checkpoint: payload checksum mismatch (manifest {expected:08x}, payload {actual:08x})")]
    Checksum { expected: u32, actual: u32 },

    #[error("checkpoint: tensor `{name}` inconsistent with payload: {detail}")]
    Manifest { name: String, detail: String },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("sequence {path}: {detail}")]
    Sequence { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use contract;
