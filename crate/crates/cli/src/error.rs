use std::path::PathBuf;

/// Failures mapped onto the process exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] ctsae::Error),
    /// A numeric check failed or a run diverged.
    #[error("{0}")]
    Numeric(String),
}

pub type CliResult<T> = Result<T, CliError>;

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> u8 {
        use ctsae::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Core(e) => match e {
                E::Io { .. } | E::Format { .. } | E::Rows { .. } => EXIT_IO,
                E::Divergence { .. } => EXIT_NUMERIC,
                E::Config(_) | E::Tensor(_) | E::Data(_) => EXIT_CONFIG,
            },
        }
    }
}
