//! Library side of the `milseg` command: configuration, dataset layout,
//! report formats, and one function per subcommand.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod report;

use std::fmt;
use std::path::Path;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration. Exit code 1.
    Usage(String),
    /// A check failed (gradients, non-finite training). Exit code 2.
    Verification(String),
    /// Missing, unreadable or malformed files. Exit code 3.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Verification(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Verification(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<milseg::Error> for CliError {
    fn from(e: milseg::Error) -> Self {
        use milseg::Error as E;
        match e {
            E::Io(_) | E::Format(_) | E::Parse { .. } => CliError::Io(e.to_string()),
            E::NonFinite(_) => CliError::Verification(e.to_string()),
            E::Shape(_) | E::InvalidArgument(_) | E::TooSmall(_) => CliError::Usage(e.to_string()),
        }
    }
}
