use std::path::PathBuf;

use crate::latent::{Role, Stream};

/// Errors produced by the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("duplicate role {0:?} in layout")]
    DuplicateRole(Role),

    #[error("role {role:?} is not valid for the {stream:?}")]
    RoleStreamMismatch { role: Role, stream: Stream },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention row {0} has no allowed key")]
    FullyMaskedRow(usize),

    #[error("every token was flagged as prompt; guidance would be empty")]
    EmptyGuidance,

    #[error("guidance error: {0}")]
    Guidance(String),

    #[error("{stage} client failed: {message}")]
    Client { stage: String, message: String },

    #[error("backend `{0}` is not available in this build")]
    BackendUnavailable(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("tensor file {path}: {message}")]
    TensorFile { path: PathBuf, message: String },

    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn client(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Client {
            stage: stage.into(),
            message: message.into(),
        }
    }

    /// True for failures of an external (or stubbed) model backend.
    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Client { .. } | Error::BackendUnavailable(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
