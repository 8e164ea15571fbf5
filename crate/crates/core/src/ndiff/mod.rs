//! Minimal reverse-mode differentiation over sequential layer stacks, plus
//! the Adadelta optimizer and the checkpoint format.

pub mod adadelta;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod layers;
mod tensor;

pub use adadelta::Adadelta;
pub use graph::{Gradients, Graph, GraphBuilder, Trace};
pub use layers::{Layer, Mode};
pub use layers::sigmoid;
pub use tensor::Tensor;
