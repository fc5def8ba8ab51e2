//! Core library for the CoCAViT backbone family: a small dense-tensor engine
//! with reverse-mode differentiation, window/coordinator attention operators,
//! the coordinator lifecycle (generation, cross-stage merging, anchor
//! regularization), full model assembly at the published scales, and a
//! closed-form-vs-measured computational cost analyzer.
//!
//! Everything numeric is generic over the scalar type (`f32` for training,
//! `f64` for verification); see [`Scalar`]. Concrete aliases [`Tensor32`] and
//! [`Tensor64`] are exported at the crate root.

pub mod attention;
pub mod backbone;
pub mod complexity;
pub mod coordinator;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod macs;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor. All finite-difference and exactness
/// suites run at this width.
pub type Tensor64 = Tensor<f64>;
