use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the enhancement stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid Taylor order {0}; must be at least 1")]
    InvalidOrder(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed image data: {0}")]
    Format(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministicFunction { first: f64, second: f64 },

    #[error("loss became non-finite at step {step} (lr {lr:e}): {diagnostics}")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        diagnostics: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configuration, shapes,
    /// file formats) rather than failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidShape { .. }
                | Error::Shape { .. }
                | Error::InvalidOrder(_)
                | Error::Format(_)
                | Error::UnsupportedFormat(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
