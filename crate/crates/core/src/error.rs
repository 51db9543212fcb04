use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unsupported image ({reason}); expected an 8-bit grayscale or RGB PNG")]
    UnsupportedImage { path: PathBuf, reason: String },
    #[error("{path}: PNG decode failed: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("eye landmarks coincide; alignment is undefined")]
    CoincidentEyes,
    #[error("crop {crop} exceeds image size {height}x{width}")]
    CropTooLarge { crop: usize, height: usize, width: usize },
    #[error("image {height}x{width} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall { height: usize, width: usize, window: usize },
    #[error("verification needs both positive and negative pairs ({positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("image has zero variance; embedding is undefined")]
    DegenerateEmbedding,
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("non-finite loss at step {step} ({detail}); offending batch dumped to {dump}")]
    Diverged { step: u64, detail: String, dump: PathBuf },
    #[error("{path}: JSON error: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
