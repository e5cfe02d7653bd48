use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    MalformedRecord { path: PathBuf, line: usize, message: String },
    #[error("duplicate doc_id {doc_id} in source {source_id}")]
    DuplicateDocId { doc_id: u64, source_id: String },
    #[error("mixture weights sum to {sum}, outside tolerance {tolerance}")]
    WeightSum { sum: f64, tolerance: f64 },
    #[error("invalid weight {weight} for source {source_id}")]
    InvalidWeight { source_id: String, weight: f64 },
    #[error("source {0} is named in the mixture but not provided")]
    MissingSource(String),
    #[error("source {0} is provided but has no mixture weight")]
    UnweightedSource(String),
    #[error("source {source_id} has only {available} tokens but {required} are needed without repetition; use a smaller budget")]
    RepetitionRequired { source_id: String, available: u64, required: u64 },
    #[error("doc {doc_id} has no score from scorer {scorer}")]
    MissingScore { doc_id: u64, scorer: String },
    #[error("invalid scorer {name}: {message}")]
    Scorer { name: String, message: String },
    #[error("unknown source {source_id} in capability list {capability}")]
    UnknownSource { capability: String, source_id: String },
    #[error("no checkpoints for capability {0}")]
    MissingCapability(String),
    #[error("non-finite {what} at checkpoint step {step}")]
    NonFinite { what: String, step: usize },
    #[error("no source has positive aggregate influence")]
    NoPositiveSource,
    #[error("no stats for source {0}")]
    MissingStats(String),
    #[error("step grids differ between trajectories")]
    StepGridMismatch,
    #[error("records belong to phase {records} but the model is at phase {model}")]
    PhaseMismatch { records: usize, model: usize },
    #[error("non-finite entry in matrix at ({row}, {col})")]
    NonFiniteMatrix { row: usize, col: usize },
    #[error("invalid config field {field}: {message}")]
    Config { field: String, message: String },
    #[error("missing upstream artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] tinylm::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }
}
