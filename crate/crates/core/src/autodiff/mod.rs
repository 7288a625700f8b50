//! Minimal reverse-mode automatic differentiation over `f64` tensors.

mod graph;
pub mod gradcheck;
mod params;
mod tensor;

pub use graph::{AttentionProbs, Graph, Var};
pub use params::{accumulate, zeros_like, Adam, Bound, ParamId, ParamStore};
pub use tensor::{gemm, Tensor};
