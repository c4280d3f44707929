use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("negative sampling gave up after {attempts} draws ({accepted} of {requested} accepted); dataset too dense")]
    Density {
        requested: usize,
        accepted: usize,
        attempts: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in `{param}`")]
    Numeric { param: String },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
