//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The operation set is the one a convolutional encoder/decoder with attention
//! needs: broadcasting arithmetic, reductions, grouped/dilated convolution,
//! per-sample dynamic convolution, bilinear resize, adaptive pooling, batched
//! matrix products and softmax.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use kernels::conv::Conv2dOpts;
pub use tensor::Tensor;
