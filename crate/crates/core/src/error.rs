use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length {len} is not divisible by squeeze factor {factor}; pad with {pad} trailing samples")]
    Length { len: usize, factor: usize, pad: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("1x1 mixing matrix of block {block} is numerically singular (|det| = {det:e})")]
    Singular { block: usize, det: f64 },

    #[error("non-finite value at {stage}")]
    NonFinite { stage: String },

    #[error("degenerate signal: {0}")]
    Degenerate(String),

    #[error("audio format: {0}")]
    Format(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not readable by this build (supports {supported})")]
    Version { found: u32, supported: u32 },

    #[error("training aborted: {0}")]
    Aborted(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn non_finite(stage: impl Into<String>) -> Self {
        Error::NonFinite { stage: stage.into() }
    }

    /// Short stable tag used by the command line for machine-readable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Length { .. } => "length",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Singular { .. } => "singular",
            Error::NonFinite { .. } => "numerical",
            Error::Degenerate(_) => "degenerate",
            Error::Format(_) => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::Version { .. } => "version",
            Error::Aborted(_) => "aborted",
            Error::Io(_) => "io",
            Error::Tensor(_) => "tensor",
            Error::Wav(_) => "wav",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
