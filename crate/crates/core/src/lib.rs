pub mod camera;
pub mod cli;
pub mod conditioning;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod imageio;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
