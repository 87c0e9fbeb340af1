//! Dense tensors, reverse-mode differentiation, Adam, cosine annealing and a
//! finite-difference gradient checker.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, grad_check_finite_diff, grad_check_many, GradCheckReport};
pub use optim::{adam_step, cosine_lr, AdamConfig, LrSchedule, OptimizerState};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

use crate::error::{CmusError, Result};

/// `rows x cols` matrix uniform in `±sqrt(6 / (rows + cols))`.
pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

/// Softmax of a non-empty finite vector.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(CmusError::InvalidValue("softmax of an empty vector".into()));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(CmusError::InvalidValue(format!(
            "softmax input {i} is {}",
            x[i]
        )));
    }
    Ok(tape::softmax_slice(x))
}

/// `x W + b` on detached values. Same arithmetic as [`Tape::linear`].
pub fn linear_apply(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let out = tape.linear(x, w, b)?;
    Ok(tape.value(out).clone())
}
