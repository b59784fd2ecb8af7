use std::io;

use thiserror::Error;

/// Failure categories shared by every module.
///
/// The CLI maps categories onto exit codes, so new variants must pick one of
/// the existing categories in [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    State,
    Integrity,
    Check,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Dimension { .. } | Error::Contract(_) | Error::Config(_) => {
                ErrorCategory::Config
            }
            Error::State(_) => ErrorCategory::State,
            Error::Integrity(_) | Error::Io(_) => ErrorCategory::Integrity,
            Error::Check(_) => ErrorCategory::Check,
        }
    }

    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension { op, left, right }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
