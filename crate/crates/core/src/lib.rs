//! Data-free quantization lab.
//!
//! Synthesizes calibration batches from the stored batch-norm statistics of
//! a pretrained CNN (slack distribution alignment plus layerwise sample
//! enhancement), calibrates and fake-quantizes the network, and measures
//! sample diversity and quantized accuracy.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the 64-bit configuration used by the CLI and tests.

// `!(a > b)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod graph;
pub mod modelzoo;
pub mod ops;
pub mod quantize;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Network64 = modelzoo::Network<f64>;
pub type Network32 = modelzoo::Network<f32>;
pub type Dataset64 = modelzoo::Dataset<f64>;
pub type BnStats64 = modelzoo::BnStats<f64>;
pub type FeatureStats64 = modelzoo::FeatureStats<f64>;



pub type SlackMargins64 = datagen::SlackMargins<f64>;
pub type QuantParams64 = quantize::QuantParams<f64>;
pub type QuantizedNetwork64 = quantize::QuantizedNetwork<f64>;
