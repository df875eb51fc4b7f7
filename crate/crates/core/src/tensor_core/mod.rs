//! Dense `f64` tensors and a reverse-mode autodiff tape.

mod graph;
mod tensor;

pub use graph::{Graph, NodeId};
pub use tensor::*;
