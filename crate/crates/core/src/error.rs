use thiserror::Error;

/// Errors produced anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum FdnError {
    #[error("frequency {freq} Hz outside [0, {nyquist}] Hz")]
    FrequencyDomain { freq: f64, nyquist: f64 },
    #[error("invalid filter specification: {0}")]
    InvalidFilter(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("series too short: {steps} steps, need at least {min}")]
    TooShort { steps: usize, min: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("episode has no static segment; mark one with `static_end_s` before preprocessing")]
    MissingStaticSegment,
    #[error("not enough episodes: have {have}, need {need}")]
    NotEnoughEpisodes { have: usize, need: usize },
    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),
    #[error("non-finite {component} loss at step {step}")]
    NonFiniteLoss { step: usize, component: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error("parse error in {file}: {msg}")]
    Parse { file: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FdnError>;
