use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("{0}")]
    Tape(String),

    #[error("gradient overflow")]
    GradientOverflow,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid span at line {line}: {detail}")]
    InvalidSpan { line: usize, detail: String },

    #[error("record {line}: {detail}")]
    Record { line: usize, detail: String },

    #[error("negative weight {weight} for span ({start}, {end}) in session {session}")]
    NegativeWeight {
        session: String,
        start: usize,
        end: usize,
        weight: f64,
    },

    #[error("session {0} has no surviving content tokens")]
    NoContent(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("sequence length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },

    #[error("boundary unavailable for span ({start}, {end}) in sequence of length {len}")]
    BoundaryUnavailable { start: usize, end: usize, len: usize },

    #[error("no masked positions")]
    EmptyPlan,

    #[error("plan/sequence length mismatch: {0}")]
    PlanMismatch(String),

    #[error("target position {0} is in the perturbed set")]
    TargetPerturbed(usize),

    #[error("invalid predicate position {pos} for sequence of length {len}")]
    InvalidPredicate { pos: usize, len: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {components}")]
    NonFiniteLoss { step: u64, components: String },

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("checkpoint/config mismatch: {0}")]
    ParamMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: impl Into<String>) -> Self {
        Error::Shape {
            op,
            shapes: shapes.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
