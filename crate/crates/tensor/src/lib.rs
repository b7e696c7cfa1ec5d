//! Minimal dense tensors and reverse-mode differentiation.
//!
//! Enough machinery to build, train and run the small convolutional
//! networks of the hand-gesture pipeline deterministically on a CPU.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use graph::{Conv2dSpec, Gradients, Graph, Var};
pub use layers::{Conv2d, Linear, Mlp2};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use params::{ParamId, Params};
pub use rng::{Rng, Stream};
pub use tensor::Tensor;
