use thiserror::Error;

/// Failure of a subcommand, carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(taml_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) | CliError::Core(_) => 1,
        }
    }

    pub fn io(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }
}

impl From<taml_core::Error> for CliError {
    fn from(e: taml_core::Error) -> Self {
        use taml_core::Error as E;
        match e {
            E::NonFinite(m) => CliError::Divergence(m),
            E::Config(m) => CliError::Config(m),
            E::ParamMismatch(m) => CliError::Config(format!("parameter mismatch: {m}")),
            other => CliError::Core(other),
        }
    }
}
