//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("fingerprint mismatch for {path}: manifest says {expected}, file hashes to {got}")]
    FingerprintMismatch {
        path: String,
        expected: String,
        got: String,
    },

    #[error("checksum failure in shard {0}")]
    ShardChecksum(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("unknown layer: {0}")]
    UnknownLayer(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 missing artifact, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dataset(_) => 2,
            Error::MissingArtifact(_)
            | Error::FingerprintMismatch { .. }
            | Error::ShardChecksum(_) => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}
