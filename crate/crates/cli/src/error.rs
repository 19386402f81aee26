use std::io::ErrorKind;

use thiserror::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING_INPUT: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Core(#[from] hooknet_core::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        use hooknet_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::MissingInput(_) => EXIT_MISSING_INPUT,
            CliError::Core(e) => match e {
                E::Io { source, .. } if source.kind() == ErrorKind::NotFound => EXIT_MISSING_INPUT,
                E::Io { .. } | E::Data(_) => EXIT_MISSING_INPUT,
                E::Numeric(_) | E::Divergence { .. } | E::Degenerate(_) => EXIT_NUMERIC,
                _ => EXIT_USAGE,
            },
        }
    }
}
