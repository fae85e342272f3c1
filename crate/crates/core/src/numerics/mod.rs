//! Dense tensors, reverse-mode differentiation, and the scalar transforms
//! the rest of the crate builds on.

mod graph;
pub mod gradcheck;
pub mod layers;
mod params;
pub mod scalar;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Gradients, Graph, Var};
pub use params::{init, ParamId, ParamStore, Parameter};
pub use scalar::{inverse_sigmoid, sigmoid, softmax};
pub use tensor::Tensor;
