//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for trainable leaves.
//! Elements are `f32` or `f64` through the [`Scalar`] trait.

pub mod checkpoint;
mod error;
mod graph;
mod scalar;
mod tensor;

pub use error::TensorError;
pub use graph::{Gradients, Graph, Var};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
