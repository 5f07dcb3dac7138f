use std::path::PathBuf;

use thiserror::Error;
use tse_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("unsupported audio: {0}")]
    Audio(String),
    #[error("silent {0}")]
    Silent(&'static str),
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("input too short: {0}")]
    TooShort(String),
    #[error("bad {format} file: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },
    #[error("k-means: {0}")]
    KMeans(String),
    #[error("token {token} out of range for vocabulary {k}")]
    TokenRange { token: u32, k: u32 },
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("config: {0}")]
    Config(String),
    #[error("hash mismatch: {what} expects {expected}, got {actual}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error("metric: {0}")]
    Metric(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
