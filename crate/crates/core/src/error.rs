//! Crate-wide error type with process exit-code mapping.

use thiserror::Error;

/// Errors produced while evaluating tape operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: invalid input: {details}")]
    Invalid { op: &'static str, details: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) => 2,
            Error::Numerics(_) => 3,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_contract() {
        assert_eq!(Error::config("x").exit_code(), 1);
        assert_eq!(Error::data("x").exit_code(), 2);
        let numeric = Error::from(NumericsError::NonFinite { op: "log" });
        assert_eq!(numeric.exit_code(), 3);
    }
}
