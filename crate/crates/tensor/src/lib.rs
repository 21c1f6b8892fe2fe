//! Dense `f64` tensors and a small reverse-mode autodiff tape.
//!
//! Everything runs single-threaded in a fixed order, so repeated runs produce
//! bit-identical results.

pub mod gemm;
mod graph;
pub mod kernels;
mod tensor;

pub use graph::{bilinear_sigma, Gradients, Graph, UpsampleMode, Var, SIGMA_FLOOR};
pub use tensor::Tensor;
