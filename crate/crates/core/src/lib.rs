//! Sparse binary-weight transformers for multivariate time series.
//!
//! The crate trains small transformer encoders whose weight matrices are
//! discovered as sparse sign patterns inside frozen random tensors, then
//! freezes them into a bit-packed container with a matching inference
//! runtime and an analytic cost model (non-zero FLOPs and storage bits).

pub mod artifact;
pub mod attention;
pub mod autodiff;
pub mod biprop;
pub mod costmodel;
pub mod error;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod presets;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod threshold;

pub use autodiff::{BatchStats, Gradients, NodeId, Tape};
pub use error::{Error, Result};
pub use optim::{Adam, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Precision used for training-side numerics.
pub type TrainScalar = f64;
/// Precision used by the frozen inference runtime.
pub type InferScalar = f32;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
