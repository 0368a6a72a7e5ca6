//! Command-line pipeline: expert generation, training, evaluation, offline
//! scoring and gradient checks.

pub mod commands;
pub mod config;

use std::path::Path;
use std::time::Duration;

use mimic_core::bridge::BridgeClient;
use mimic_core::checkpoint::CheckpointError;
use mimic_core::encoder::{BuiltinEncoder, Clip, ClipEncoder, Embedding, EncoderError, EncoderParams};
use mimic_core::env::EnvError;
use mimic_core::trainer::TrainError;
use mimic_core::video::VideoError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Format(_) => 4,
            CliError::Failed(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Format(format!("{}: {e}", path.display()))
    }
}

impl From<VideoError> for CliError {
    fn from(e: VideoError) -> Self {
        match e {
            VideoError::InvalidScript(_) | VideoError::EmptyField(_) | VideoError::UnstableGait { .. } => {
                CliError::Config(e.to_string())
            }
            VideoError::Sim(_) => CliError::Divergence(e.to_string()),
            _ => CliError::Format(e.to_string()),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::BridgeUnavailable(_) | EncoderError::Protocol(_) | EncoderError::Timeout(_) => {
                CliError::Format(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Encoder(e) => e.into(),
            EnvError::Sim(_) => CliError::Divergence(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_divergence() {
            return CliError::Divergence(e.to_string());
        }
        match e {
            TrainError::Env(e) => e.into(),
            e => CliError::Config(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Format(e.to_string())
    }
}

/// Built-in encoder or a bridge connection.
pub enum Encoder {
    Builtin(BuiltinEncoder),
    Bridge(Box<BridgeClient>),
}

impl Encoder {
    pub fn open(bridge: Option<&str>, params: &EncoderParams, timeout_secs: f64) -> Result<Self, CliError> {
        match bridge {
            None => Ok(Encoder::Builtin(BuiltinEncoder::new(params.clone()))),
            Some(addr) => {
                let client = BridgeClient::connect(addr, Duration::from_secs_f64(timeout_secs))?;
                log::info!("connected to encoder bridge at {addr} (d = {})", client.dim());
                Ok(Encoder::Bridge(Box::new(client)))
            }
        }
    }
}

impl ClipEncoder for Encoder {
    fn dim(&self) -> usize {
        match self {
            Encoder::Builtin(e) => e.dim(),
            Encoder::Bridge(e) => e.dim(),
        }
    }

    fn encode(&mut self, clip: &Clip) -> Result<Embedding, EncoderError> {
        match self {
            Encoder::Builtin(e) => e.encode(clip),
            Encoder::Bridge(e) => e.encode(clip),
        }
    }
}
