//! Capsule networks whose convolution stage can use depthwise separable
//! convolutions, with a closed-form cost analyzer and a small training harness.

pub mod autograd;
pub mod capsule;
pub mod checkpoint;
pub mod cli;
pub mod conv;
pub mod cost;
pub mod data;
pub mod error;
pub mod model;
pub mod plot;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
