use thiserror::Error;

/// Errors raised by the reconstruction library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    /// A loss component evaluated to NaN or infinity.
    #[error("non-finite loss component `{component}`{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite {
        component: String,
        step: Option<usize>,
    },

    #[error("missing ground truth: {0}")]
    MissingGroundTruth(&'static str),

    #[error("malformed PLY: {0}")]
    Ply(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding failed: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True when the error stems from numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Degenerate(_))
    }
}
