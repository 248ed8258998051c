use std::fmt;

use vfd_core::VfdError;

/// A failure reported as `error[<category>]: <message>` on one line.
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(category: &'static str, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("config", message)
    }

    pub fn path(message: impl Into<String>) -> Self {
        Self::new("path", message)
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::new("io", format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.replace(['\n', '\r'], " ");
        write!(f, "error[{}]: {}", self.category, one_line)
    }
}

impl std::error::Error for CliError {}

impl From<VfdError> for CliError {
    fn from(e: VfdError) -> Self {
        Self::new(e.category(), e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new("serde", e.to_string())
    }
}
