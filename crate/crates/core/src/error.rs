use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A value was used in a state its invariants forbid.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// An enumeration would exceed its configured cap.
    #[error("size cap exceeded: {0}")]
    SizeCap(String),

    /// Linear algebra failed beyond what jitter/clamping can repair.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Every hypothesis weight vanished; the density is degenerate.
    #[error("degenerate density: {0}")]
    Degenerate(String),

    /// Serialized fixture or config text could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
