use thiserror::Error;

use crate::saliency::SaliencyMap;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has zero norm")]
    ZeroVectorRow { row: usize },

    #[error("batch of {0} pairs is too small, contrastive losses need at least 2")]
    BatchTooSmall(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("row {row} of the {side} embeddings has norm {norm}, expected 1")]
    NotNormalized { side: &'static str, row: usize, norm: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("preprocessing failed: {0}")]
    Preprocess(String),

    #[error("prompt is empty")]
    EmptyPrompt,

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("backend `{0}` does not expose target-layer activations")]
    ActivationsUnavailable(String),

    #[error("backend `{0}` does not accept gradient updates")]
    BackendFrozen(String),

    #[error("could not decode {path}: {reason}")]
    Decode { path: String, reason: String },

    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions(Vec<f64>),

    #[error("k = {k} is out of range for {candidates} candidates")]
    KTooLarge { k: usize, candidates: usize },

    #[error("corpus has {size} items, fewer than the batch size {batch_size}")]
    CorpusTooSmall { size: usize, batch_size: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("no foreground component passes the area threshold")]
    NoForeground,

    #[error("zero-shot segmentation found no foreground for the prompt")]
    EmptySegmentation { saliency: Box<SaliencyMap> },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("checkpoint is corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("ground truth has a single class, AUC is undefined")]
    SingleClassGt,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code, used in CLI stderr and HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ZeroVectorRow { .. } => "ZeroVectorRow",
            Error::BatchTooSmall(_) => "BatchTooSmall",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NotNormalized { .. } => "NotNormalized",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Preprocess(_) => "PreprocessError",
            Error::EmptyPrompt => "EmptyPrompt",
            Error::BackendUnavailable(_) => "BackendUnavailable",
            Error::ActivationsUnavailable(_) => "ActivationsUnavailable",
            Error::BackendFrozen(_) => "BackendFrozen",
            Error::Decode { .. } => "DecodeError",
            Error::BadFractions(_) => "BadFractions",
            Error::KTooLarge { .. } => "KTooLarge",
            Error::CorpusTooSmall { .. } => "CorpusTooSmall",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::SizeMismatch(_) => "SizeMismatch",
            Error::NoForeground => "NoForeground",
            Error::EmptySegmentation { .. } => "EmptySegmentation",
            Error::EmptyTrainingSet => "EmptyTrainingSet",
            Error::CheckpointCorrupt(_) => "CheckpointCorrupt",
            Error::SingleClassGt => "SingleClassGT",
            Error::Io(_) => "IoError",
        }
    }

    /// True for errors caused by the caller's input rather than the environment.
    pub fn is_client_error(&self) -> bool {
        !matches!(
            self,
            Error::BackendUnavailable(_) | Error::Io(_) | Error::CheckpointCorrupt(_)
        )
    }
}
