//! EEG-to-image reconstruction at desk scale: EEG trials condition a small
//! latent diffusion model through a zero-initialized control adapter,
//! reconstructions pass a prompt-guided image-to-image boosting stage, and
//! the system is evaluated across electrode densities with knockout ablations
//! and generative image metrics.
//!
//! Start with the `examples/` directory: each example exercises one major
//! capability end to end. The `mindcanvas` binary wires the same library
//! calls into a reproducible experiment pipeline.

pub mod ablation;
pub mod boosting;
pub mod checkpoint;
pub mod dataset;
pub mod decoder;
pub mod diffusion;
pub mod metrics;
pub mod montage;
pub mod nn;
pub mod pipeline;
pub mod stats;
