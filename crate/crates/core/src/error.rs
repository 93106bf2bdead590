use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("unknown layer id: {0}")]
    UnknownLayer(String),

    #[error("training failed at step {step}: {what}")]
    Training { step: usize, what: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("malformed file {path}: {what}")]
    Format { path: PathBuf, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
