//! Reverse-mode automatic differentiation over dense `f32` tensors, with the
//! layers and optimizers used to train small dense networks.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod layers;
mod optim;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var, LOG_CLAMP_MIN};
pub use layers::{dense_layer, Activation, BoundMlp, Dense, LayerSpec, Mlp};
pub use optim::{Optimizer, OptimizerConfig};
pub use tensor::Tensor;
