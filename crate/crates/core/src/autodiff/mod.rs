//! Minimal reverse-mode differentiation: dense tensors, a recording tape
//! with the primitives the network needs, Adam, and a finite-difference
//! checker.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_difference_check, Evaluation, GradCheckConfig, GradCheckReport};
pub use tape::{softmax, Attended, Gradients, Pooled, Tape, Var};
pub use tensor::{Scalar, Tensor};
