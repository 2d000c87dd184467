//! Quasi-parametric human parsing: a matching CNN inside a KNN label-transfer
//! pipeline.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod knn;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
