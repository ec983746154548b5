//! Dense tensors, forward kernels, reverse-mode differentiation and SGD.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use ops::Reduction;
pub use optim::{sgd_step, Sgd};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
