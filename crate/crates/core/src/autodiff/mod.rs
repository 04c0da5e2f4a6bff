//! Reverse-mode automatic differentiation and first-order optimizers.

mod graph;
pub mod optim;
mod params;

pub use graph::{CustomBackward, Gradients, Graph, NodeId, Tensor};
pub use params::{Bound, ParamId, ParamStore};
