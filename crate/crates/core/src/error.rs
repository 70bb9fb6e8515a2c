//! Error type shared by every stage of the detector.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("failed to decode {path}: {detail}")]
    Decode { path: PathBuf, detail: String },

    #[error("failed to encode {path}: {detail}")]
    Encode { path: PathBuf, detail: String },

    #[error("template generation failed for {params}: {detail}")]
    Generation { params: String, detail: String },

    #[error("weight file format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
