//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, RowStats, Var};
#[cfg(test)]
pub(crate) use graph::{gelu, softplus};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
