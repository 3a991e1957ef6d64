use thiserror::Error;

pub type Result<T> = std::result::Result<T, DrError>;

#[derive(Debug, Error)]
pub enum DrError {
    /// Input violates a documented invariant (bad law, bad parameters).
    #[error("validation error: {0}")]
    Validation(String),

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The operation requires a state it was not given (e.g. an untruncated trace).
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// A support or work bound would be exceeded.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A floating quantity left the representable range.
    #[error("range error: {0}")]
    Range(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl DrError {
    pub fn validation(msg: impl Into<String>) -> Self {
        DrError::Validation(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        DrError::Domain(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        DrError::Precondition(msg.into())
    }

    pub fn capacity(msg: impl Into<String>) -> Self {
        DrError::Capacity(msg.into())
    }

    pub fn range(msg: impl Into<String>) -> Self {
        DrError::Range(msg.into())
    }
}
