pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod degrade;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod imageio;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod transformer;

pub use error::{Error, Result};
