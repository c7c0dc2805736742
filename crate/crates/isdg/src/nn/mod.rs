//! Minimal differentiable numerics: tensors, a reverse-mode operation tape,
//! parameter storage with an adaptive optimizer, and finite-difference
//! gradient checking.
//!
//! Everything is generic over the float width: training runs at 32-bit,
//! gradient checks at 64-bit.

mod check;
mod state;
mod tape;
mod tensor;

pub use check::{finite_diff_check, FdReport};
pub use state::{Adam, Init, ModelState, Param};
pub use tape::{Gradients, IdxMat, LstmParams, MaskMode, StepSrc, Tape, Value};
pub use tensor::{Real, Tensor};
