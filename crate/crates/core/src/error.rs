use std::io;

use thiserror::Error;

/// Broad failure class, used by the command-line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("invalid size distribution: {0}")]
    InvalidDistribution(String),

    #[error("flow reconstruction mismatch at k={k}: {reason}")]
    FlowMismatch { k: usize, reason: String },

    #[error("cluster state corrupted: {0}")]
    StateCorruption(String),

    #[error("step rejected at t={t}: v_{k} = {value:e} below the negative threshold, reduce dt")]
    NegativeValue { t: f64, k: usize, value: f64 },

    #[error("non-finite value in solver state at t={t}")]
    NonFinite { t: f64 },

    #[error("gelation time undefined: first moment is zero")]
    UndefinedGelation,

    #[error("tail fit failed: {0}")]
    Fit(String),

    #[error("trace format: {0}")]
    Format(String),

    #[error("unsupported trace version {found:?}, expected {expected:?}")]
    Version { found: String, expected: &'static str },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config { field, reason: reason.into() }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config { .. } | Error::InvalidDistribution(_) => ErrorClass::Config,
            Error::Io(_) | Error::Format(_) | Error::Version { .. } => ErrorClass::Io,
            Error::FlowMismatch { .. }
            | Error::StateCorruption(_)
            | Error::NegativeValue { .. }
            | Error::NonFinite { .. }
            | Error::UndefinedGelation
            | Error::Fit(_) => ErrorClass::Numerical,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
