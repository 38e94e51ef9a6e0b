//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! The engine records every primitive applied inside a [`Graph`] on a tape and
//! replays the tape backwards to accumulate gradients into a [`ParamStore`].
//! Values are generic over [`Real`] so that the exact same network code can be
//! run in `f32` for training and in `f64` for finite-difference checks.

mod checkpoint;
mod error;
mod gradcheck;
mod graph;
pub mod init;
mod optim;
mod params;
mod real;
mod tensor;

pub use checkpoint::{text_digest, Checkpoint, CheckpointEntry};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{Graph, Mode, Var};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
