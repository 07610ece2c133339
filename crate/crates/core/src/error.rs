//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid spec: field `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },

    #[error("unresolved policy: {0}")]
    UnresolvedPolicy(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("capacity exceeded: {0}")]
    CapacityExceeded(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid state: {0}")]
    InvalidState(String),
}

impl Error {
    /// Stable machine-readable kind tag, used by the CLI error object.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::InvalidSpec { .. } => "invalid-spec",
            Error::UnresolvedPolicy(_) => "unresolved-policy",
            Error::Infeasible(_) => "infeasible",
            Error::CapacityExceeded(_) => "capacity-exceeded",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::InvalidState(_) => "invalid-state",
        }
    }
}
