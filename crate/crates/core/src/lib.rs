//! Toy latent-diffusion inference engine.

pub mod adapters;
pub mod error;
pub mod models;
pub mod perfbench;
pub mod pipelines;
pub mod preprocess;
pub mod schedulers;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
