//! Dense tensors, reverse-mode differentiation, AdamW and the checkpoint
//! container. Everything else in the crate is built from these pieces.

pub mod checkpoint;
mod float;
pub mod gradcheck;
pub mod ops;
pub mod optim;
mod param;
pub mod rng;
mod tape;
mod tensor;

pub use float::Float;
pub use optim::AdamW;
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Function, Gradients, Tape, Var};
pub use tensor::Tensor;
