use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // data_store
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("schema mismatch in {file}: {detail}")]
    SchemaMismatch { file: String, detail: String },
    #[error("duplicate id {id} in {table}")]
    DuplicateId { table: &'static str, id: String },
    #[error("non-finite value in {table}, field {field}")]
    NonFiniteValue { table: &'static str, field: String },
    #[error("coverage gap for event {event_id} at {timestamp}")]
    CoverageGap { event_id: String, timestamp: String },
    #[error("unknown event: {0}")]
    UnknownEvent(String),
    #[error("foreign key violation: {0}")]
    ForeignKey(String),
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed value in {file}: {detail}")]
    Parse { file: String, detail: String },

    // synth_hydro
    #[error("invalid count: {0}")]
    InvalidCount(String),
    #[error("invalid duration: {0} hours (minimum 6)")]
    InvalidDuration(u32),
    #[error("incomplete features: {0}")]
    IncompleteFeatures(String),
    #[error("empty table")]
    EmptyTable,
    #[error("invalid oracle parameters: {0}")]
    InvalidParams(String),

    // features
    #[error("no gauges to interpolate from")]
    NoGauges,
    #[error("missing tide for {0}")]
    MissingTide(String),
    #[error("unknown segment {0}")]
    UnknownSegment(i64),
    #[error("degenerate feature {0}: zero standard deviation on training rows")]
    DegenerateFeature(String),

    // windowing
    #[error("event {event_id} too short: {duration_hrs} hours for look-back {look_back}")]
    EventTooShort {
        event_id: String,
        duration_hrs: usize,
        look_back: usize,
    },
    #[error("event {0} appears in both train and test sets")]
    OverlappingSplits(String),
    #[error("targets missing for event {0}")]
    MissingTargets(String),

    // neuralnet / model
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("scaler does not match model feature set: {0}")]
    ScalerMismatch(String),
    #[error("unsupported model file version {0}")]
    ModelVersion(String),

    // nas / eval
    #[error("no successful runs in log")]
    EmptyLog,
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("missing fold model: {0}")]
    MissingFoldModel(String),
    #[error("insufficient rows for correlation: {0}")]
    InsufficientRows(usize),

    // cli
    #[error("unknown command: {0}")]
    UnknownCommand(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("gradient check failed: {0}")]
    GradientCheckFailed(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "MissingFile",
            Error::SchemaMismatch { .. } => "SchemaMismatch",
            Error::DuplicateId { .. } => "DuplicateId",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::CoverageGap { .. } => "CoverageGap",
            Error::UnknownEvent(_) => "UnknownEvent",
            Error::ForeignKey(_) => "ForeignKey",
            Error::IoFailure { .. } => "IoFailure",
            Error::Parse { .. } => "Parse",
            Error::InvalidCount(_) => "InvalidCount",
            Error::InvalidDuration(_) => "InvalidDuration",
            Error::IncompleteFeatures(_) => "IncompleteFeatures",
            Error::EmptyTable => "EmptyTable",
            Error::InvalidParams(_) => "InvalidParams",
            Error::NoGauges => "NoGauges",
            Error::MissingTide(_) => "MissingTide",
            Error::UnknownSegment(_) => "UnknownSegment",
            Error::DegenerateFeature(_) => "DegenerateFeature",
            Error::EventTooShort { .. } => "EventTooShort",
            Error::OverlappingSplits(_) => "OverlappingSplits",
            Error::MissingTargets(_) => "MissingTargets",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::EmptyBatch => "EmptyBatch",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::ScalerMismatch(_) => "ScalerMismatch",
            Error::ModelVersion(_) => "ModelVersion",
            Error::EmptyLog => "EmptyLog",
            Error::EmptyInput => "EmptyInput",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::MissingFoldModel(_) => "MissingFoldModel",
            Error::InsufficientRows(_) => "InsufficientRows",
            Error::UnknownCommand(_) => "UnknownCommand",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::GradientCheckFailed(_) => "GradientCheckFailed",
            Error::Json(_) => "Json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
