//! Dense tensors, reverse-mode autodiff, SGD and checkpoints.

mod params;
mod real;
mod sgd;
mod tape;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;

pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub(crate) use real::gemm_new;
pub use sgd::Sgd;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
