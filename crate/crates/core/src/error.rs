use std::fmt;

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Numerical,
    Usage,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("unsupported {0}")]
    Unsupported(String),

    #[error(
        "non-halving pyramid at level {level}: expected {expected_width}x{expected_height}, \
         found {found_width}x{found_height}"
    )]
    NonHalvingPyramid {
        level: usize,
        expected_width: usize,
        expected_height: usize,
        found_width: usize,
        found_height: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tile source ended early: {0}")]
    SourceExhausted(String),

    #[error("singular transform (|det| = {0:e})")]
    Singular(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl fmt::Display) -> Self {
        Error::Format {
            what,
            detail: detail.to_string(),
        }
    }

    pub(crate) fn invalid(detail: impl fmt::Display) -> Self {
        Error::InvalidArgument(detail.to_string())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl fmt::Display) -> Self {
        Error::Config {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io(_)
            | Error::Format { .. }
            | Error::Unsupported(_)
            | Error::NonHalvingPyramid { .. }
            | Error::SourceExhausted(_) => ErrorClass::Io,
            Error::Singular(_) | Error::Numerical(_) => ErrorClass::Numerical,
            Error::Config { .. } => ErrorClass::Config,
            Error::DimensionMismatch(_) | Error::InvalidArgument(_) => ErrorClass::Usage,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
