use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: wrong shape, out-of-range value, empty collection.
    #[error("validation error: {0}")]
    Validation(String),

    /// Hyperparameters or partition sizes that cannot be honoured.
    #[error("configuration error: {0}")]
    Config(String),

    /// A state transition that contradicts the current dataset state.
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("NIfTI error in {path}: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("array file error in {path}: {message}")]
    Npy { path: PathBuf, message: String },
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::Consistency(_) => "consistency",
            Error::EmptyMask => "empty_mask",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
            Error::Nifti { .. } => "nifti",
            Error::Npy { .. } => "npy",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
