use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input tensor does not match the model's declared shape.
    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed dataset, out-of-range labels, unknown sample ids.
    #[error("data error: {0}")]
    Data(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("trigger selection error: {0}")]
    Selection(String),

    #[error("watermarking error: {0}")]
    Watermark(String),

    #[error("attack error: {0}")]
    Attack(String),

    #[error("verification error: {0}")]
    Verification(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("persistence error in {path}: {message}")]
    Persistence { path: PathBuf, message: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn persistence(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Persistence {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Name of the pipeline stage that produced this error, if any.
    pub fn stage(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
