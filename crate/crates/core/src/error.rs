use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported architecture family: {0}")]
    UnsupportedFamily(String),

    #[error("depth not realizable: {0}")]
    DepthNotRealizable(String),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("block {0} is not prunable")]
    NotPrunable(usize),

    #[error("block id {id} out of range (graph has {len} blocks)")]
    BlockOutOfRange { id: usize, len: usize },

    #[error("invalid graph: {}", .0.join("; "))]
    InvalidGraph(Vec<String>),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("probe `{block}` produced a non-finite loss")]
    ProbeDiverged { block: usize },

    #[error("probe feature dimension {dim} for block {block} exceeds cap {cap}")]
    FeatureCap { block: usize, dim: usize, cap: usize },

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("empty evaluation split")]
    EmptySplit,

    #[error("ProbeReport is missing block {0}")]
    MissingBlock(usize),

    #[error("requested {requested} blocks but only {available} are prunable")]
    CountTooLarge { requested: usize, available: usize },

    #[error("G must lie in [0, 1), got {0}")]
    RatioOutOfRange(f64),

    #[error("infeasible prune target: {target} > {available} prunable blocks")]
    InfeasibleTarget { target: usize, available: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt dataset file {path}: {reason}")]
    CorruptDataset { path: PathBuf, reason: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("incompatible manifests: {0}")]
    IncompatibleManifests(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}
