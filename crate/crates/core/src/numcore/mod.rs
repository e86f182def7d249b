//! Dense tensors and a tape-based reverse-mode differentiator.

mod graph;
pub mod gradcheck;
mod kernels;
mod tensor;

pub use graph::{BatchStats, Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;

/// Guard added to norms and variances.
pub const EPS: f64 = 1e-12;
