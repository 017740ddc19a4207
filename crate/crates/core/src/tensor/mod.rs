//! Dense tensors and reverse-mode differentiation.

mod dense;
pub mod gradcheck;
mod graph;
pub mod kernels;

pub use dense::Tensor;
pub use graph::{sigmoid, softplus, BinaryOp, Graph, NodeId, ReduceOp, UnaryOp, EPS};
