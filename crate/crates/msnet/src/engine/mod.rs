//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Everything is double precision. A [`Graph`] is a linear tape built per
//! forward pass; [`fd_check`] is the finite-difference oracle used to
//! verify every backward rule.

mod conv;
mod fd;
mod graph;
mod tensor;

pub use conv::conv_forward;
pub use fd::fd_check;
pub use graph::{BatchStats, Graph, NodeId};
pub use tensor::Tensor;
