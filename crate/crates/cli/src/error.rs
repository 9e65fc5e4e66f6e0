use dee_core::DeeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),

    #[error(transparent)]
    Core(#[from] DeeError),
}

impl CliError {
    /// 2 for configuration, 3 for data, 1 for numerical problems and failed checks.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::GradcheckFailed(_) => 1,
            CliError::Core(e) => match e {
                DeeError::Config(_) => 2,
                DeeError::Format { .. }
                | DeeError::Io(_)
                | DeeError::ShapeMismatch(_)
                | DeeError::Stream(_)
                | DeeError::DegenerateInput(_) => 3,
                DeeError::NumericalDegeneracy { .. } | DeeError::DegenerateRouting(_) | DeeError::StaleCache { .. } => 1,
            },
        }
    }
}
