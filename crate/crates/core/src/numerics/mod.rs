//! Dense f64 linear algebra, stable activations and losses, Adam, and a
//! central-difference gradient oracle.

mod adam;
mod gradcheck;
mod matrix;
mod ops;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use matrix::Matrix;
pub use ops::{argmax, cross_entropy_from_logits, log_softmax, log_sum_exp, sigmoid, softmax};
