use std::fmt;

use serde::Serialize;

/// A failure attributed to one pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

impl StageError {
    pub fn new(stage: &str, message: impl fmt::Display) -> Self {
        Self { stage: stage.to_string(), message: message.to_string() }
    }

    /// `{"error":{"stage":..,"message":..}}`
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for StageError {}

pub type StageResult<T> = std::result::Result<T, StageError>;

/// Tags any displayable error with the stage it came from.
pub trait AtStage<T> {
    fn at(self, stage: &str) -> StageResult<T>;
}

impl<T, E: fmt::Display> AtStage<T> for std::result::Result<T, E> {
    fn at(self, stage: &str) -> StageResult<T> {
        self.map_err(|e| StageError::new(stage, e))
    }
}
