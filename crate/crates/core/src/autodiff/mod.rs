//! Reverse-mode differentiation over a dynamically recorded graph of the
//! tensor operations the detector needs.

mod graph;
pub(crate) mod kernels;

pub use graph::{BatchStats, Graph, Var};
pub(crate) use graph::sigmoid;
