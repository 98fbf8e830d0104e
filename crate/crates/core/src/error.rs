use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("missing property `{0}`")]
    MissingProperty(String),
    #[error("invalid cloud: {0}")]
    InvalidCloud(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cloud has no normals; estimate them first")]
    MissingNormals,
    #[error("invalid partition at point {index}: {reason}")]
    InvalidPartition { index: usize, reason: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("label error: {0}")]
    Labels(String),
    #[error("super-voxel {supervoxel} of scene `{scene}` is already annotated")]
    DuplicateSupervoxel { scene: String, supervoxel: usize },
    #[error("class id {class_id} out of range (C = {classes})")]
    ClassOutOfRange { class_id: usize, classes: usize },
    #[error("insufficient candidates: need {needed}, have {available}")]
    Insufficient { needed: usize, available: usize },
    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),
    #[error("infeasible scene: {0}")]
    Infeasible(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("experiment error: {0}")]
    Experiment(String),
    /// A request that clashes with the current experiment state.
    #[error("conflict: {0}")]
    Conflict(String),
    /// A label submission that does not answer the pending queries.
    #[error("invalid submission: {0}")]
    InvalidSubmission(String),
    #[error("json error: {0}")]
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

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
