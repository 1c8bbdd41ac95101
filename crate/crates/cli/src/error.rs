use std::path::PathBuf;

use thiserror::Error;

/// Everything a subcommand can fail with, each mapped to an exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config values or input shapes (exit 2).
    #[error("{0}")]
    Usage(String),
    /// Filesystem trouble (exit 3).
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A check the command exists to run did not hold (exit 1).
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] refattn::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use refattn::Error as E;
        match self {
            Self::Check(_) => 1,
            Self::Usage(_) => 2,
            Self::Io { .. } => 3,
            Self::Core(E::Dimension { .. } | E::Shape { .. } | E::Config { .. } | E::Usage(_)) => 2,
            Self::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
