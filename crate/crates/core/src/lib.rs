//! Channel-adaptive generative semantic communication of 3D point clouds.

pub mod channel;
pub mod config;
pub mod dataio;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod jscc;
pub mod metrics;
pub mod nn;
pub mod octree;
pub mod system;
pub mod training;

pub use error::{Error, Result};
