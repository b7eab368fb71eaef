//! HoloDiffusion at desk scale: a diffusion model over 3D feature voxel
//! grids trained from posed images through differentiable emission-absorption
//! rendering, with a two-pass bootstrapped denoising objective.

pub mod dataio;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod renderer;
pub mod schedule;
pub mod trainer;
pub mod unprojector;
pub mod voxel_grid;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};

/// The crate-wide seedable generator.
pub type Rng = rand_chacha::ChaCha8Rng;
