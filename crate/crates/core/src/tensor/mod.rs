//! Dense tensors, reverse-mode autodiff, parameter storage and Adam.

mod array;
pub mod checkpoint;
mod graph;
mod params;
mod rng;

pub use array::Tensor;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{Grads, Graph, Var, LAYER_NORM_EPS};
pub use params::{AdamConfig, Param, ParamStore};
pub use rng::Rng;

