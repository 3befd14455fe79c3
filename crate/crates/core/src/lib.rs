pub mod artifact;
pub mod cli;
pub mod data;
pub mod diffusion;
pub mod distillation;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod personalization;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
