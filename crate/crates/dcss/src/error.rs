use std::fmt;
use std::path::Path;

/// Failure of a command, classified by its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or arguments (exit 2).
    Config(String),
    /// Non-finite loss or parameters (exit 3).
    Numeric(String),
    /// File system or format problems (exit 4).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dcss_core::Error> for CliError {
    fn from(e: dcss_core::Error) -> Self {
        use dcss_core::Error as E;
        match e {
            E::NonFinite { .. } => CliError::Numeric(e.to_string()),
            E::MissingParameter { .. } | E::DataLength { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
