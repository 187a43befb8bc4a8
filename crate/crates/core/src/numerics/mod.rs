//! Minimal reverse-mode differentiation engine with exactly the operations
//! the ranking model needs.

mod graph;
mod pool;
mod tensor;

pub use graph::{
    check_permutation, invert_permutation, pairwise_ce_loss, pairwise_margin_loss, Activation,
    Graph, NodeId,
};
#[cfg(test)]
use graph::sigmoid;
pub use pool::kmax_with_positions;
pub use tensor::Tensor;
