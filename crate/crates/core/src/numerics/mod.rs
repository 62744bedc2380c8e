//! Dense tensors, a reverse-mode autodiff graph, and a finite-difference
//! gradient oracle.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{log_sigmoid, sigmoid, Gradients, Graph, Var};
pub use tensor::Tensor;
