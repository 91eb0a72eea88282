//! Crate-level error with process exit-code mapping for the CLI.

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::data::DataError;
use crate::encoders::{DatasetFileError, EncoderError};
use crate::etf::EtfError;
use crate::federation::FederationError;
use crate::numerics::NumericsError;
use crate::prompts::PromptError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    DatasetFile(#[from] DatasetFileError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Etf(#[from] EtfError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    /// CLI exit code: 2 config, 3 data, 4 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Checkpoint(CheckpointError::Config(_)) => 2,
            Error::Data(_) | Error::DatasetFile(_) | Error::Checkpoint(_) => 3,
            _ => 4,
        }
    }
}
