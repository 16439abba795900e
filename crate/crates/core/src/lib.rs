pub mod align;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod latents;
pub mod objective;
pub mod parallel;
pub mod render;
pub mod scalar;
pub mod sim;
pub mod tensor;

mod binio;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision model.
pub type Model = dynamics::Dynamics<f32>;
/// Gradient-check precision model.
pub type Model64 = dynamics::Dynamics<f64>;
pub type Latents = latents::LatentSequence<f32>;
pub type Latents64 = latents::LatentSequence<f64>;
pub type Array = tensor::Tensor<f32>;
pub type Array64 = tensor::Tensor<f64>;
