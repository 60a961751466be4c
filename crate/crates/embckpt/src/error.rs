use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] embckpt_core::Error),
    #[error("object store: {0}")]
    Io(#[from] io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint conflict: {0}")]
    Conflict(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no valid checkpoint for run `{0}`")]
    NoCheckpoint(String),
}

impl Error {
    /// Errors that mean a stored checkpoint is damaged, as opposed to the
    /// store being unreachable.
    pub fn is_corruption(&self) -> bool {
        matches!(self, Error::Integrity(_) | Error::Manifest(_) | Error::Core(embckpt_core::Error::Format(_)))
    }
}
