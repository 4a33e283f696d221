use super::Matrix;
use crate::error::{Error, Result};

/// Per-parameter Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    /// Zeroed moments for a parameter of the given shape, with
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(rows: usize, cols: usize, learning_rate: f64) -> Self {
        AdamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn for_param(param: &Matrix, learning_rate: f64) -> Self {
        AdamState::new(param.rows(), param.cols(), learning_rate)
    }
}

/// One bias-corrected Adam update of `param` in place.
///
/// Entries whose gradient is exactly zero with zero moments are left
/// bit-identical.
pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape()
        || param.shape() != state.m.shape()
        || param.shape() != state.v.shape()
    {
        return Err(Error::Dimension(format!(
            "adam: param {:?}, grad {:?}, moments {:?}/{:?}",
            param.shape(),
            grad.shape(),
            state.m.shape(),
            state.v.shape()
        )));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let step = state.learning_rate / (1.0 - b1.powf(state.t as f64));
    let inv_sqrt_bc2 = 1.0 / (1.0 - b2.powf(state.t as f64)).sqrt();
    let eps = state.epsilon;
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    // a zero update subtracts 0.0, which leaves the parameter bit-identical
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= step * *m / (v.sqrt() * inv_sqrt_bc2 + eps);
    }
    Ok(())
}
