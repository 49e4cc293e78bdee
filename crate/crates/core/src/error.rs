//! Workspace-wide error type.
//!
//! Every error carries a stable category slug so the CLI can emit
//! machine-parsable `error:<category>:` lines.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0} vs {1}")]
    Dimension(String, String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("matrix is not positive definite: {0}")]
    Singular(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("benchmark generation failed: {0}")]
    Generation(String),

    #[error("unknown token: {0}")]
    UnknownToken(String),

    #[error("input of {got} tokens exceeds context length {max}")]
    OverLength { got: usize, max: usize },

    #[error("unresolvable module address: {0}")]
    Address(String),

    #[error("localization failed: {0}")]
    Localization(String),

    #[error("capability violation: {0}")]
    Capability(String),

    #[error("editor requires training before use: {0}")]
    TrainingRequired(String),

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("edit failed: {0}")]
    EditFailure(String),

    #[error("method is registered but not implemented: {0}")]
    UnimplementedMethod(String),

    #[error("unknown method: {0}")]
    UnknownMethod(String),

    #[error("hyperparameter error: {0}")]
    Hparams(String),

    #[error("no snapshot available for rollback")]
    NoSnapshot,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable slug used in `error:<category>:` CLI output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(..) => "dimension",
            Error::Contract(_) => "contract",
            Error::Singular(_) => "singular",
            Error::Capacity(_) => "capacity",
            Error::Generation(_) => "generation",
            Error::UnknownToken(_) => "unknown-token",
            Error::OverLength { .. } => "over-length",
            Error::Address(_) => "address",
            Error::Localization(_) => "localization",
            Error::Capability(_) => "capability",
            Error::TrainingRequired(_) => "training-required",
            Error::Divergence(_) => "divergence",
            Error::EditFailure(_) => "edit-failure",
            Error::UnimplementedMethod(_) => "unimplemented-method",
            Error::UnknownMethod(_) => "unknown-method",
            Error::Hparams(_) => "hparams",
            Error::NoSnapshot => "rollback",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
