//! The tri-modal student network and its checkpoint format.
//!
//! Parameters live in plain `ndarray` matrices and every layer has a
//! hand-written backward pass, so the same code runs in `f32` for training
//! and in `f64` for finite-difference gradient checks.

pub mod checkpoint;
pub mod config;
pub mod input;
pub mod layers;
pub mod network;

#[cfg(test)]
mod tests;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use config::{AblationFlags, ModelConfig};
pub use input::{image_to_patches, InstructionVectors, ModelInput};
pub use layers::{Params, Scalar};
pub use network::{
    cumulative_waypoints, FusionContexts, IntentModulation, RiskOutput, SceneFusionOutput, TriModalNet, VisualFeatures,
};

use crate::scenario::DrivingIntent;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid intent index {0}; expected 0..=3")]
    InvalidIntent(u8),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Intent from its wire index.
pub fn intent_from_index(v: u8) -> Result<DrivingIntent, ModelError> {
    DrivingIntent::from_index(v).ok_or(ModelError::InvalidIntent(v))
}
