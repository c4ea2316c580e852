use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("backward has already been run on this graph")]
    DoubleBackward,
    #[error("gradient reversal requires a finite positive lambda, got {0}")]
    InvalidLambda(f64),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("length mismatch in {op}: {left} vs {right}")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("invalid label {label} in {op}")]
    InvalidLabel { op: &'static str, label: f64 },
    #[error("missing feature `{0}`")]
    MissingFeature(String),
    #[error("duplicate feature `{0}`")]
    DuplicateFeature(String),
    #[error("unmapped target feature `{0}`")]
    UnmappedFeature(String),
    #[error("transition encoder has no channel for source feature `{0}`")]
    MissingSourceChannel(String),
    #[error("representation width mismatch: teacher {teacher}, transition {transition}")]
    WidthMismatch { teacher: usize, transition: usize },
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("{path}:{line}: duplicate observation for patient `{patient}`, time {time}, feature `{feature}`")]
    DuplicateObservation {
        path: PathBuf,
        line: u64,
        patient: String,
        time: u32,
        feature: String,
    },
    #[error("no outcome label for patient `{0}`")]
    MissingLabel(String),
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("only one class present among labels; AUROC undefined")]
    SingleClass,
    #[error("too few patients: {patients} for {folds} folds")]
    TooFewPatients { patients: usize, folds: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged in {stage} at epoch {epoch}: loss is not finite")]
    Divergence { stage: &'static str, epoch: usize },
    #[error("unsupported checkpoint format_version {0}")]
    CheckpointVersion(u64),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("label isolation violated: {0}")]
    LabelLeak(String),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
