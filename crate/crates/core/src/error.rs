use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A document could not be decoded; `field` is the JSON path of the offending value.
    #[error("parse error at `{field}`: {message}")]
    Parse { field: String, message: String },

    /// A decoded document broke one or more invariants. Every violation is listed.
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// A caller broke an operation's precondition (shape mismatch, empty mask, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared in a computation.
    #[error("numerical error in {term}{}", .timestep.map(|t| format!(" at timestep {t}")).unwrap_or_default())]
    Numerical { term: String, timestep: Option<usize> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
