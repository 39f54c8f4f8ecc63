//! Minimal differentiable core: tensors, a tape with reverse-mode gradients,
//! dense and LSTM layers, Adam, and a binary checkpoint format.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointHeader, TensorEntry, MAGIC};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use layers::{dense_forward, lstm_step, uniform_init, Activation, DenseLayer, LstmCell, Mlp};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
