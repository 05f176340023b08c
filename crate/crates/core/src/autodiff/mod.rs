//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine records exactly the primitives the model needs (matrix
//! product, row-wise bias, GELU, sigmoid, row softmax, row layer norm, row
//! and column concatenation/slicing) on a define-by-run [`Graph`].

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, Objective};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
