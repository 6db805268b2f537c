use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: not an HKTW checkpoint")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("non-finite parameter in layer `{0}`")]
    NonFiniteParameter(String),

    #[error("non-finite loss during training (first non-finite layer: `{0}`)")]
    NonFiniteLoss(String),

    #[error("incompatible checkpoints at layer `{layer}`: {reason}")]
    Incompatible { layer: String, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the content of inputs (as opposed to the
    /// environment), e.g. corrupt checkpoints or inconsistent manifests.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::NonFiniteLoss(_))
    }
}
