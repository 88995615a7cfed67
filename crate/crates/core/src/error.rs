use thiserror::Error;

/// Errors raised by the library.
///
/// The variants line up with how a caller is expected to react: domain and
/// validation errors come from bad inputs, instability means the model has no
/// well-defined limit theory, and consistency errors mean two independent
/// numerical routes disagreed.
#[derive(Debug, Error)]
pub enum BarError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("instability: {0}")]
    Instability(String),
    #[error("internal consistency failure: {0}")]
    Consistency(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = BarError> = std::result::Result<T, E>;

impl BarError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        BarError::Domain(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        BarError::Validation(msg.into())
    }
}
