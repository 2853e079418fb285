//! Tensors, reverse-mode differentiation, optimization, checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use graph::{Graph, NodeId};
pub use optim::{Param, ParamStore, Sgd};
pub use tensor::Tensor;
