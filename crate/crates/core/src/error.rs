use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor/volume shapes; `detail` names the offending axes.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed on-disk artifact (bad magic, truncated payload, ...).
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Optimizer rejected an update (e.g. non-finite gradient).
    #[error("optimizer error for parameter `{name}`: {detail}")]
    Optimizer { name: String, detail: String },

    /// Training diverged or was otherwise aborted at a known step.
    #[error("training error at step {step}: {detail}")]
    Training { step: usize, detail: String },

    /// Ancestral sampling produced a non-finite intermediate.
    #[error("sampling error at timestep {t}: {detail}")]
    Sampling { t: usize, detail: String },

    /// A required upstream artifact is missing.
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    /// Autodiff tape misuse (double backward, non-scalar root, ...).
    #[error("tape error: {0}")]
    Tape(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }
}
