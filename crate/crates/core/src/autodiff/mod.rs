//! Reverse-mode automatic differentiation over dense 2-D arrays.

mod gradcheck;
mod graph;

pub use gradcheck::{finite_difference_check, GradCheck};
pub use graph::{Feeds, Graph, NamedArrays, NodeId};
