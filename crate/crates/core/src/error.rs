use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("invalid codec: {0}")]
    InvalidCodec(String),

    #[error("time grid needs at least one step")]
    InvalidSteps,

    #[error("invalid time interval: {0}")]
    InvalidTime(String),

    #[error("denoiser returned a non-finite velocity at t={t}")]
    NonFiniteVelocity { t: f64 },

    #[error("fixed-point iterate {iteration} diverged: norm {norm:e} exceeds bound {bound:e}")]
    DivergenceDetected {
        iteration: usize,
        norm: f64,
        bound: f64,
    },

    #[error("velocity field is singular at t={t}")]
    SingularTime { t: f64 },

    #[error("all mixture responsibilities underflowed at t={t}")]
    DegenerateField { t: f64 },

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("effective sample size {ess:.1} below the minimum of {min}")]
    InsufficientEffectiveSamples { ess: f64, min: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("prompt is empty")]
    EmptyPrompt,

    #[error("alignment maps target token {target} to source token {source_index}, but the source has {source_len} tokens")]
    AlignmentOutOfRange {
        target: usize,
        source_index: usize,
        source_len: usize,
    },

    #[error("hook returned a {kind} map of shape {got:?}, expected {expected:?}")]
    HookShapeViolation {
        kind: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("prompts cannot be aligned: {0}")]
    PromptMismatch(String),

    #[error("cosine similarity of a zero vector")]
    ZeroVector,

    #[error("bad magic bytes {0:?}, expected \"OAVG\"")]
    BadMagic([u8; 4]),

    #[error("unsupported grid version {0}")]
    UnsupportedVersion(u32),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 1 for usage, input and configuration problems, 2 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteVelocity { .. }
            | Error::DivergenceDetected { .. }
            | Error::SingularTime { .. }
            | Error::DegenerateField { .. }
            | Error::InsufficientEffectiveSamples { .. }
            | Error::NonFinite { .. } => 2,
            _ => 1,
        }
    }
}
