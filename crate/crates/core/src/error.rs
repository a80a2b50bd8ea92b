use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("attention context is empty")]
    EmptyContext,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph was already consumed by a backward pass")]
    GraphConsumed,

    #[error("optimizer state is not initialized for parameter `{0}`")]
    UninitializedState(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("prompt is empty")]
    EmptyPrompt,

    #[error("image {width}x{height} is not divisible by patch size {patch}")]
    Indivisible {
        width: usize,
        height: usize,
        patch: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unknown fabric `{0}`")]
    UnknownFabric(String),

    #[error("fabric database is empty")]
    EmptyDatabase,

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid image file {}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("timestep {t} outside 0..={max}")]
    Timestep { t: usize, max: usize },

    #[error("{0}")]
    Invalid(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
