//! Linear diffusion transformers at desk scale.
//!
//! The crate converts a softmax-attention diffusion transformer (DiT) into a
//! linear-attention one: kernelized attention with a depthwise-convolution
//! value branch, weight inheritance from a pre-trained teacher, and a hybrid
//! noise-plus-variance distillation objective. It also ships the pieces needed
//! to check all of that: a small reverse-mode autodiff, a DDPM sampler, an
//! analytic and instrumented MAC model, and a binary checkpoint format.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root name the common instantiations.

pub mod attention;
pub mod backbone;
pub mod checks;
pub mod complexity;
pub mod convert;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod pipeline_io;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type ParamStore32 = backbone::ParamStore<f32>;
pub type ParamStore64 = backbone::ParamStore<f64>;
pub type Dit32 = backbone::Dit<f32>;
pub type Dit64 = backbone::Dit<f64>;
