//! Dense `f64` tensors, a recording tape for reverse-mode gradients, a
//! central-difference gradient checker, and Adam.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_difference_check, gradient_check_report, GradCheckReport};
pub use tape::{Gradients, Tape, Var, GELU_CUBIC};
pub use tensor::Tensor;
