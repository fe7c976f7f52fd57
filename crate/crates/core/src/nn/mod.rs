//! Minimal dense neural-network toolkit: tensors, a reverse-mode tape, layers and Adam.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Var};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;
