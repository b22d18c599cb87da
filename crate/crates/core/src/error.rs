use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no brain found: foreground is empty at threshold {threshold}")]
    NoBrainFound { threshold: f64 },

    #[error("budget error: {0}")]
    Budget(String),

    #[error("empty candidate set for {region} with {requested} points requested")]
    EmptyCandidates { region: String, requested: usize },

    #[error("hard clip violated: {count} points outside the brain mask")]
    HardClip { count: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("length error: {0}")]
    Length(String),

    #[error("value error: {0}")]
    Value(String),

    #[error("integrity error: checksum mismatch (expected {expected}, computed {computed})")]
    Integrity { expected: String, computed: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss at step {step} (batch ids: {batch_ids:?})")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
