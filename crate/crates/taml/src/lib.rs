//! File formats, configuration and subcommands around `taml_core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod log;
pub mod tasks;

use std::path::Path;

pub use config::ExperimentConfig;
pub use error::CliError;

/// Writes `contents`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}", dir.display()), e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}
