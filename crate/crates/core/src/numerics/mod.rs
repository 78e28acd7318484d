//! Dense tensors, the reverse-mode tape and the finite-difference oracle.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod real;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_inputs, GradCheck};
pub use graph::{Graph, Var};
pub use real::{DType, Real};
pub use tensor::Tensor;
