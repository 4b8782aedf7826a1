//! Reference-guided reversed ISP.
//!
//! Converts RGB images into RAW-like images that resemble a reference RAW
//! image. The reversed pipeline is a chain of differentiable, invertible ISP
//! blocks whose parameters are picked per image pair from small trainable
//! dictionaries by a reference-guided selector network.
//!
//! This crate is `no_std` (it needs `alloc`). Enable the `std` feature to let
//! the matrix kernels detect SIMD extensions at runtime.
#![no_std]
// Negated comparisons are how parameter checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod autodiff;
pub mod error;
pub mod gradient_suite;
pub mod isp;
pub mod metrics;
pub mod pseudo_pairs;
pub mod real;
pub mod selector;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
