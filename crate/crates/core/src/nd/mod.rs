//! Numeric substrate: dense tensors, a reverse-mode tape, and SGD.

pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::SgdState;
pub use tape::{temporal_conv1d, Gradients, NodeId, Tape};
pub use tensor::Tensor;
