//! Dense tensors and tape-based reverse-mode differentiation.

mod graph;
pub mod kernels;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub(crate) use graph::huber_value;
pub use real::Real;
pub use tensor::Tensor;
