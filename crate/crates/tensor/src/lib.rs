//! Minimal dense tensor library: `f64` tensors, a reverse-mode autodiff
//! tape, SGD with momentum, and cosine learning-rate annealing.

pub mod error;
#[cfg(any(test, feature = "testing"))]
pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use optim::OptimizerState;
pub use schedule::cosine_anneal_lr;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
