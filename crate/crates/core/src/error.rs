use std::fmt;
use std::path::PathBuf;

/// A tensor shape, printed as `[2, 3]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeDisplay(pub Vec<usize>);

impl fmt::Display for ShapeDisplay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AtdError {
    #[error("invalid shape {shape}: every dimension must be >= 1")]
    InvalidShape { shape: ShapeDisplay },

    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    Shape {
        op: &'static str,
        lhs: ShapeDisplay,
        rhs: ShapeDisplay,
    },

    #[error("{op}: non-finite value encountered ({detail})")]
    NumericDomain { op: &'static str, detail: String },

    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("{path}:{line}{}: {msg}", .column.map(|c| format!(":{c}")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: usize,
        column: Option<usize>,
        msg: String,
    },

    #[error("{path}: tensor format error at byte offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AtdError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        AtdError::Shape {
            op,
            lhs: ShapeDisplay(lhs.to_vec()),
            rhs: ShapeDisplay(rhs.to_vec()),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        AtdError::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AtdError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, AtdError>;
