//! Crate-wide error type and exit-code mapping.

use crate::tensor::TensorError;

/// Top-level error for the lab. Variants map to process exit codes: bad
/// inputs exit 2, invariant breaches exit 3, i/o and format problems exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The caller supplied something unusable: bad config, missing file,
    /// malformed flag value, unknown language, and so on.
    #[error("input error: {0}")]
    Input(String),

    /// A property the system promises to maintain was observed broken, such
    /// as a backbone changing during prompt tuning.
    #[error("invariant breach: {0}")]
    Invariant(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file existed but its contents were not what the format promises:
    /// wrong magic, bad checksum, malformed JSON.
    #[error("format error: {0}")]
    Format(String),

    /// A programming contract was violated inside the library.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) => 2,
            Error::Invariant(_) => 3,
            Error::Io(_) | Error::Format(_) => 4,
            Error::Internal(_) => 1,
        }
    }
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        Error::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
