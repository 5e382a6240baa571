//! Command implementations behind the `sfuda` binary, kept in a library so
//! integration tests can drive them without spawning processes.

pub mod commands;
pub mod config;
pub mod selftest;

use std::path::Path;

use serde::Serialize;

/// Command failure, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Check(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "invalid_config",
            CliError::Check(_) => "failed_check",
            CliError::Io(_) => "io",
        }
    }
}

impl From<sfuda_core::Error> for CliError {
    fn from(e: sfuda_core::Error) -> Self {
        use sfuda_core::Error as E;
        match e {
            E::InvalidArgument(_) | E::ShapeMismatch(_) | E::Empty(_) => CliError::Config(e.to_string()),
            E::NonFinite { .. } => CliError::Check(e.to_string()),
            E::Io { .. } | E::Format { .. } | E::Json(_) | E::Csv(_) => CliError::Io(e.to_string()),
        }
    }
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
