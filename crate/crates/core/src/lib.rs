//! Differentiable channel and depth search with knowledge transfer to the
//! derived network.

// Negated comparisons such as `!(x > 0.0)` are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod distill;
pub mod error;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TensorF64 = tensor::Tensor<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type ConvNetF64 = supernet::ConvNet<f64>;
pub type ConvNetF32 = supernet::ConvNet<f32>;
pub type SuperNetF64 = supernet::SuperNet<f64>;
pub type SuperNetF32 = supernet::SuperNet<f32>;
pub type ArchParamsF64 = supernet::ArchParams<f64>;
pub type ArchParamsF32 = supernet::ArchParams<f32>;
pub type SearchStateF64 = search::SearchState<f64>;
pub type SearchStateF32 = search::SearchState<f32>;
