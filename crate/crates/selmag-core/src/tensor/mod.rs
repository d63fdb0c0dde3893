//! Dense matrices, tape-based reverse-mode autodiff, and optimizers.

mod matrix;
mod optim;
mod tape;

pub use matrix::Matrix;
pub use optim::Adam;
pub use tape::{finite_diff_grad, max_rel_err, softplus, GradStore, Tape, ValueId, LOG_CLAMP};
