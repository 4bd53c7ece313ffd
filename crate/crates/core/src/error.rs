//! Error type shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the engine, the model, data handling, and training.
#[derive(Debug)]
pub enum Error {
    /// Two tensor shapes that had to agree did not.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An API contract was violated (non-scalar loss, empty metric input, ...).
    Contract(String),
    /// A configuration value is invalid or inconsistent.
    Config(String),
    /// A byte stream does not follow its file format.
    Format { what: String, offset: Option<u64> },
    /// A manifest line could not be parsed.
    Parse { line: usize, what: String },
    /// A parsed value violates its documented range.
    Validation { line: usize, what: String },
    /// Training produced a non-finite loss.
    Training {
        epoch: usize,
        batch: usize,
        what: String,
    },
    /// A metric is undefined on this input (e.g. zero ground-truth variance).
    DegenerateMetric { dimension: &'static str },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::Contract(what) => write!(f, "contract violation: {what}"),
            Error::Config(what) => write!(f, "invalid configuration: {what}"),
            Error::Format { what, offset } => match offset {
                Some(off) => write!(f, "format error at byte {off}: {what}"),
                None => write!(f, "format error: {what}"),
            },
            Error::Parse { line, what } => write!(f, "parse error on line {line}: {what}"),
            Error::Validation { line, what } => {
                write!(f, "validation error on line {line}: {what}")
            }
            Error::Training { epoch, batch, what } => {
                write!(f, "training failed at epoch {epoch}, batch {batch}: {what}")
            }
            Error::DegenerateMetric { dimension } => {
                write!(f, "metric undefined: zero variance in dimension {dimension}")
            }
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
