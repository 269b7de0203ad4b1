use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spectrum: {0}")]
    Spectrum(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged at step {step}: loss {loss:e} exceeds {limit:e}")]
    Diverged { step: usize, loss: f64, limit: f64 },

    #[error("non-finite value during integration at t = {t}")]
    NonFinite { t: f64 },

    #[error("degenerate clustering input")]
    DegenerateClustering,

    #[error("no features learned; cannot normalize")]
    NoFeaturesLearned,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("arm {arm}, seed {seed}: {source}")]
    Run { arm: String, seed: u64, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
