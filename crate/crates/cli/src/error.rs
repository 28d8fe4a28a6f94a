use std::path::PathBuf;

use switching_mdp::Error as CoreError;

/// Failures of a CLI run, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config {
        message: String,
        line: Option<usize>,
    },

    #[error("{context}: {source}")]
    Numerical {
        context: String,
        source: CoreError,
    },

    #[error("i/o error on {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError::Config {
            message: message.into(),
            line: None,
        }
    }

    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Classifies a core error: argument and model errors are config
    /// errors, the rest are numerical.
    pub fn core(context: impl Into<String>, source: CoreError) -> Self {
        let context = context.into();
        match source {
            CoreError::UnknownModel(_)
            | CoreError::UnknownParameter { .. }
            | CoreError::ParameterOutOfRange { .. }
            | CoreError::InvalidArgument(_)
            | CoreError::GridMismatch(_) => CliError::Config {
                message: format!("{context}: {source}"),
                line: None,
            },
            _ => CliError::Numerical { context, source },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Numerical { .. } => 3,
            CliError::Io { .. } => 4,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
