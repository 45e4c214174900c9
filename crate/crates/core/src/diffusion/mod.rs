//! Toy latent diffusion stack: autoencoder, noise schedule, conditioned UNet
//! with a frozen backbone, EEG projection with zero-initialized injection,
//! ControlNet-style adapter training, CFG sampling, and image-to-image mode.

pub mod autoencoder;
pub mod engine;
pub mod schedule;
pub mod text;
pub mod unet;

pub use engine::{ControlBatch, ControlReport, Engine, EngineConfig, EngineStages, StageHyper};
pub use schedule::{forward_diffuse, DiffusionSchedule};
pub use text::TextEmbedder;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("timestep {t} outside [0, {t_max}]")]
    TimestepOutOfRange { t: usize, t_max: usize },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("EEG channel mismatch: engine expects {expected}, trial has {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("image {w}x{h} not divisible by the downsampling factor {factor}")]
    BadDimensions { w: u32, h: u32, factor: u32 },
    #[error("noise strength {0} outside (0, 1]")]
    BadStrength(f64),
    #[error("stage '{0}' has not been trained")]
    NotTrained(&'static str),
    #[error("frozen weights changed during ControlNet training")]
    FrozenWeightMutation,
    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: usize },
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error("invalid engine config: {0}")]
    BadConfig(serde_json::Error),
    #[error(transparent)]
    Decoder(#[from] crate::decoder::DecoderError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}
