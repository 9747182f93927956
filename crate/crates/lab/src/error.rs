use exvar_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> LabError {
        LabError::Config(format!("invalid JSON: {e}"))
    }
}

impl LabError {
    /// 2 for invalid input, 3 for numerical non-convergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Core(CoreError::Convergence { .. }) => 3,
            LabError::Core(_) => 2,
            LabError::Io(_) => 1,
        }
    }
}

pub type LabResult<T> = Result<T, LabError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> LabResult<T> {
    Err(LabError::Config(msg.into()))
}
