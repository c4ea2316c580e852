//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
mod tensor;

pub use graph::{sigmoid, Graph, Var};
pub(crate) use graph::matmul_data;
pub use tensor::{softmax, softmax_rowwise, Tensor};
