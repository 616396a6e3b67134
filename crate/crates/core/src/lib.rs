//! Edge-inference optimization toolkit: train a small CNN, prune it by weight
//! magnitude, quantize it to int8, serialize it to the compact `.plite`
//! format and benchmark single-image inference latency with the first
//! (cold) inference reported separately.
//!
//! Tensor math, layers and training are generic over [`Scalar`] (`f32` or
//! `f64`). Quantization, the file format and benchmarking work on `f32`;
//! the aliases below name the concrete types most code wants.

pub mod bench;
pub mod compress;
pub mod data;
pub mod error;
pub mod lite;
pub mod nn;
pub mod report;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = nn::Model<f32>;
pub type Model64 = nn::Model<f64>;
pub type Dataset32 = data::LabeledDataset<f32>;
pub type Dataset64 = data::LabeledDataset<f64>;
pub type Params32 = nn::Params<f32>;
pub type Gradients32 = train::Gradients<f32>;
