//! Error types for every subsystem, plus the process exit codes the CLI maps
//! them to.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("n-gram order {0} outside supported range 1..=4")]
    InvalidNgramOrder(usize),
    #[error("cannot build an IDF table from an empty corpus")]
    EmptyCorpus,
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no reference sentences{}", .video_id.as_ref().map(|v| format!(" for video {v}")).unwrap_or_default())]
    MissingReference { video_id: Option<String> },
    #[error(transparent)]
    Text(#[from] TextError),
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by op {op}")]
    NonFinite { op: String },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("sequence of length {len} too short for dilation {dilation}{}", .block.map(|b| format!(" (block {b})")).unwrap_or_default())]
    SequenceTooShort {
        len: usize,
        dilation: usize,
        block: Option<usize>,
    },
    #[error("batch normalization needs a batch of at least 2 in train mode, got {0}")]
    DegenerateBatch(usize),
    #[error("target index {index} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, classes: usize },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error("decode failed for model {model_id}: {source}")]
    Decode {
        model_id: String,
        #[source]
        source: Box<ModelError>,
    },
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("video has no frames")]
    EmptyVideo,
    #[error("frame dimension mismatch: expected {expected}, found {found}")]
    FrameDim { expected: usize, found: usize },
    #[error("empty sentence passed to the comparator")]
    EmptySentence,
    #[error("numeric failure in layer {layer}")]
    NumericFailure { layer: String },
    #[error("no labelable training pairs could be built")]
    EmptyDataset,
    #[error("oracle training diverged at step {step}")]
    TrainingFailure { step: usize },
    #[error("unknown video {0} in training pairs")]
    UnknownVideo(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("pool for video {0} has fewer than 2 candidates")]
    DegeneratePool(String),
    #[error("pool for video {video_id} repeats model id {model_id}")]
    DuplicateModelId { video_id: String, model_id: String },
    #[error("empty candidate pool for video {0}")]
    EmptyPool(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("duplicate video id {0}")]
    DuplicateVideo(String),
    #[error("invalid record for video {video_id}: {message}")]
    Validation { video_id: String, message: String },
    #[error("corrupt model file: parameter {param}: {message}")]
    CorruptModel { param: String, message: String },
    #[error("architecture mismatch: expected {expected}, file holds {found}")]
    ArchMismatch { expected: String, found: String },
}

/// Crate-level error; the CLI maps each variant family to an exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("usage: {0}")]
    Usage(String),
}

impl Error {
    /// Exit code contract: 0 success, 1 usage, 2 data/validation, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Nn(NnError::NonFinite { .. })
            | Error::Nn(NnError::NonFiniteGrad { .. }) => 3,
            Error::Model(ModelError::Diverged { .. }) => 3,
            Error::Model(ModelError::Nn(NnError::NonFinite { .. }))
            | Error::Model(ModelError::Nn(NnError::NonFiniteGrad { .. })) => 3,
            Error::Oracle(OracleError::NumericFailure { .. })
            | Error::Oracle(OracleError::TrainingFailure { .. }) => 3,
            Error::Consensus(ConsensusError::Oracle(OracleError::NumericFailure { .. })) => 3,
            _ => 2,
        }
    }
}
