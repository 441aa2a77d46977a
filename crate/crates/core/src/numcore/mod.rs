//! Dense tensors, reverse-mode autodiff and first-order optimizers.

pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use kernels::smooth_abs;
pub use optim::Sgd;
pub(crate) use optim::descend;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
