use std::fmt;

use serde::Serialize;

/// A failure tagged with the pipeline stage it came from. Printed to
/// stderr as `{"stage": ..., "message": ...}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CliError {
    pub stage: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(stage: &'static str, message: impl Into<String>) -> Self {
        CliError {
            stage,
            message: message.into(),
        }
    }

    pub fn invalid(key: &str, value: impl fmt::Display, expected: &str) -> Self {
        CliError::new("config", format!("invalid value for `{key}`: {value} (expected {expected})"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain strings serialize")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

pub trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: fmt::Display> Stage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(stage, e.to_string()))
    }
}
