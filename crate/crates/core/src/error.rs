use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),

    #[error("invalid prediction matrix: {0}")]
    InvalidPrediction(crate::label_space::Violation),

    #[error("threshold {value} must lie in (0, 1)")]
    InvalidThreshold { value: f64 },

    #[error("class index {class} out of range for {total} classes")]
    ClassOutOfRange { class: usize, total: usize },

    #[error("sample {0} already carries a pseudo-label")]
    DuplicateSample(usize),

    #[error("sample ids must be unique, {0} repeats")]
    DuplicateSampleId(usize),

    #[error("operation needs at least {needed} columns, got {actual}")]
    TooFewColumns { needed: usize, actual: usize },

    #[error("label space has no extra classes")]
    NoExtraClasses,

    #[error("sample subset is empty")]
    EmptySubset,

    #[error("invalid assignment input: {0}")]
    InvalidAssignmentInput(String),

    #[error("kernel entry ({row}, {col}) is not finite; lower the regularization strength")]
    NonFiniteKernel { row: usize, col: usize },

    #[error("transport plan violates its marginals by {violation:e}")]
    InfeasibleAssignment { violation: f64 },

    #[error("strategy needs {needed} extra classes, label space has {available}")]
    InsufficientExtraClasses { needed: usize, available: usize },

    #[error("re-assignment map is not injective: ID class {0} used twice")]
    NonInjectiveMap(usize),

    #[error("{k_ood} OOD classes cannot be mapped injectively onto {k_id} ID classes")]
    TooManyOodClasses { k_ood: usize, k_id: usize },

    #[error("ground truth is unknown for unlabeled sample {0}")]
    UnknownGroundTruth(usize),

    #[error("histogram is empty")]
    EmptyHistogram,

    #[error("labeled batch is empty")]
    EmptyLabeledBatch,

    #[error("training diverged at epoch {epoch}; lower the learning rate")]
    Diverged { epoch: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("{0}: no data rows")]
    EmptyCsv(PathBuf),

    #[error("cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
