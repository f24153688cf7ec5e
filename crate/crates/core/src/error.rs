use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("layout mismatch: expected {expected} values, got {got}")]
    LayoutMismatch { expected: usize, got: usize },

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("node too small for split: node {node} has {size} samples, needs at least {needed}")]
    NodeTooSmall {
        node: usize,
        size: usize,
        needed: usize,
    },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("not an IDX file: {0}")]
    NotIdx(String),

    #[error("corrupt IDX: {0}")]
    CorruptIdx(String),

    #[error("diverged at node {node} (t = {t}): loss {loss:e}")]
    Diverged { node: usize, t: usize, loss: f64 },

    #[error("ascent diverged (try a larger lambda or smaller nu)")]
    AscentDiverged,

    #[error("learning-rate cap violated: {0}")]
    LearningRateCap(String),

    #[error("degenerate sampling: {0}")]
    DegenerateSampling(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
