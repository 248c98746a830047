use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, sizes, ranges).
    #[error("contract violation in `{op}`: {detail}")]
    Contract { op: &'static str, detail: String },

    /// An input lies outside the mathematical domain of a model.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("integration diverged at t = {time}")]
    IntegrationDiverged { time: f64 },

    #[error("config error: {0}")]
    Config(String),

    /// Dataset dimensions do not match what an experiment expects.
    #[error("data mismatch: {0}")]
    DataMismatch(String),

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// An inference run gave up (e.g. too many consecutive rejected steps).
    #[error("run aborted: {0}")]
    Aborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Contract {
        op,
        detail: detail.into(),
    }
}
