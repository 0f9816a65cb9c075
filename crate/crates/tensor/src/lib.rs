//! Small reverse-mode automatic differentiation engine for dense NCHW tensors.
//!
//! Every graph is rebuilt per forward pass. Parameters are injected by name so
//! weight-shared sub-networks accumulate into a single gradient.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod scalar;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Var};
pub use scalar::{gemm, Mat, Real};
pub use tensor::Tensor;
