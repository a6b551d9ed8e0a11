//! Dense tensors and a reverse-mode tape sufficient to train every network
//! in the crate.

mod graph;
pub mod kernels;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
