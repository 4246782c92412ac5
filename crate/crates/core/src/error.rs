use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An operation was called with arguments that break its precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// A constrained problem has no feasible point.
    #[error("infeasible problem: {0}")]
    Infeasible(String),
    /// The input does not carry the data a statistic needs.
    #[error("unsupported mode: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
