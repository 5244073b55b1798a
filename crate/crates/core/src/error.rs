use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: bad shapes, broken invariants, unparseable records.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("no segments")]
    NoSegments,

    #[error("untokenizable text")]
    Untokenizable,

    #[error("numerical overflow in {0}")]
    NumericalOverflow(&'static str),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("bundle {path}: {reason}")]
    Bundle { path: PathBuf, reason: String },

    #[error("checksum mismatch for tensor `{tensor}`: manifest {expected}, payload {actual}")]
    Checksum {
        tensor: String,
        expected: String,
        actual: String,
    },

    #[error("fixpoint compression did not converge within {0} iterations")]
    NoConvergence(usize),

    #[error("generator failure: {0}")]
    Generator(String),

    #[error("no samples")]
    NoSamples,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn bundle(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Bundle {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::Shape { .. }
                | Error::NoSegments
                | Error::Untokenizable
                | Error::Bundle { .. }
                | Error::Checksum { .. }
                | Error::NoSamples
                | Error::Json(_)
        )
    }
}
