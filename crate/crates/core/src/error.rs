use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {context} at state {state:?}")]
    NonFinite { context: String, state: Vec<f64> },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("empty selection: {0}")]
    Empty(String),

    #[error("singular linear system in {context}; try a larger nu or more data")]
    Singular { context: &'static str },

    #[error("too many rejected trajectories: {rejected} rejections for {requested} trajectories")]
    TooManyRejections { rejected: usize, requested: usize },

    #[error("unsupported Bessel order {0}")]
    UnsupportedOrder(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path:?} at byte offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("artifact {path:?} has stage hash {found}, expected {expected} (use --force to override)")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn non_finite<T: crate::Scalar>(context: impl Into<String>, state: &[T]) -> Self {
        Error::NonFinite {
            context: context.into(),
            state: state.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from numerical failure rather than bad input or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Degenerate(_)
                | Error::Empty(_)
                | Error::Singular { .. }
                | Error::TooManyRejections { .. }
        )
    }
}
