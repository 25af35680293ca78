//! Masked conditional diffusion for mobility trajectories.
//!
//! One denoiser serves generation, controllable generation, recovery and
//! prediction; the task is selected purely by the mask handed to the sampler.

pub mod checkpoint;
pub mod context;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geo;
pub mod harness;
pub mod mask;
pub mod metrics;
pub mod nn;

pub use error::{Error, Result};
