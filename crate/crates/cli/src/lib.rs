//! Command-line surface: configuration, checkpoints and the train, eval,
//! transfer and attention commands.

pub mod checkpoint;
pub mod commands;
pub mod config;

use thiserror::Error;
use updet::battlesim::EnvError;
use updet::model::ModelError;
use updet::trainer::TrainError;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("runtime fault: {0}")]
    Runtime(String),
}

impl CliError {
    /// 2 configuration, 3 checkpoint, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Checkpoint(_) | Self::Unsupported(_) => 3,
            Self::Runtime(_) => 4,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => Self::Config(m),
            TrainError::Env(EnvError::Config(m)) => Self::Config(m),
            TrainError::Model(ModelError::Config(m)) => Self::Config(m),
            TrainError::Model(ModelError::Unsupported(m)) => Self::Unsupported(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e).into()
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        TrainError::Env(e).into()
    }
}
