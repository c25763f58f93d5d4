use thiserror::Error;

#[derive(Debug, Error)]
pub enum NpviError {
    /// Bad user input: shapes, parameter ranges, malformed files.
    #[error("invalid input: {0}")]
    Input(String),

    /// A factorization or update produced an unusable value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Operation not valid in the current model state.
    #[error("invalid state: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NpviError>;

impl NpviError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        NpviError::Input(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        NpviError::Numerical(msg.into())
    }
}
