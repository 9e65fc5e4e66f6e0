use thiserror::Error;

/// Errors raised by the ensemble engine.
#[derive(Debug, Error)]
pub enum DeeError {
    /// A configuration value or argument violates its contract.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input for which a distance or direction is undefined (zero-norm vectors).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A division by zero or non-finite value inside the transport solver.
    #[error("numerical degeneracy at iteration {iteration}: {detail}")]
    NumericalDegeneracy { iteration: usize, detail: String },

    /// Voting has nothing to weight: every selected expert has zero weight.
    #[error("degenerate routing: {0}")]
    DegenerateRouting(String),

    /// Shapes disagree with the model or with saved forward state.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A forward cache was used after the model it was computed on changed.
    #[error("stale forward cache: computed at revision {cached}, model is at revision {current}")]
    StaleCache { cached: u64, current: u64 },

    /// Malformed binary or text input.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A dataset cannot be turned into the requested task stream.
    #[error("stream construction error: {0}")]
    Stream(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DeeError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DeeError::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        DeeError::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        DeeError::ShapeMismatch(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, DeeError>;
