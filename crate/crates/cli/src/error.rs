use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub const EXIT_FAILURE: u8 = 1;
/// Bad command line; clap's own code.
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_MISSING_FILE: u8 = 4;
pub const EXIT_MISSING_DEPENDENCY: u8 = 5;
pub const EXIT_HEAD_MISMATCH: u8 = 6;
pub const EXIT_CHECKPOINT: u8 = 7;
pub const EXIT_NON_FINITE: u8 = 8;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] swaplm_core::Error),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use swaplm_core::Error as E;
        match self {
            CliError::MissingFile(_) => EXIT_MISSING_FILE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_FAILURE,
            CliError::Core(e) => match e {
                E::Config(_) | E::Parse { .. } => EXIT_CONFIG,
                E::MissingDependency(_) => EXIT_MISSING_DEPENDENCY,
                E::HeadMismatch(_) => EXIT_HEAD_MISMATCH,
                E::CheckpointMismatch(_) => EXIT_CHECKPOINT,
                E::NonFinite(_) => EXIT_NON_FINITE,
                _ => EXIT_FAILURE,
            },
        }
    }
}
