use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("structure error: {0}")]
    Structure(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("out of frame: {0}")]
    OutOfFrame(String),
    #[error("empty clip: {0}")]
    EmptyClip(String),
    #[error("no eligible clip: {0}")]
    NoEligibleClip(String),
    #[error("non-finite gradient: {0}")]
    NonFiniteGrad(String),
    #[error("degenerate feature set: {0}")]
    DegenerateSet(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint not found: {}", .0.display())]
    CheckpointNotFound(PathBuf),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", .path.display())]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Broken internal invariants, as opposed to bad input or configuration.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            Error::Structure(_) | Error::Shape(_) | Error::Length(_) | Error::NonFiniteGrad(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
