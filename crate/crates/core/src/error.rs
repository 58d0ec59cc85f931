use thiserror::Error;

/// Errors surfaced by model construction, evaluation and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An operation was called in a state that does not support it.
    #[error("invalid state: {0}")]
    State(String),

    /// A value left the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A lookup key (term index, column name) was not found.
    #[error("unknown key: {0}")]
    Key(String),

    /// Non-finite values appeared where finite arithmetic is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Training diverged; the payload names the iteration of the last finite loss.
    #[error("training diverged at iteration {at_iteration}")]
    Diverged { at_iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
