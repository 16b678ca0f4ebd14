pub mod autodiff;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod marginals;
pub mod motion;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
