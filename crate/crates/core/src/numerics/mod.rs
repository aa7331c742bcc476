//! Dense tensors, reverse-mode gradients and the AdamW optimizer that every
//! model in the crate is built on.

pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig, Schedule};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Reduction, Tensor};
