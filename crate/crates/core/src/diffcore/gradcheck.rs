use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{CmusError, Result};

/// Worst coordinate found by [`grad_check_many`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tensor: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Fourth-order central difference of `at(offset)` around offset 0.
pub fn central_difference<F>(at: &mut F, h: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (m2, m1, p1, p2) = (at(-2.0 * h)?, at(-h)?, at(h)?, at(2.0 * h)?);
    Ok((m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h))
}

/// Compares reverse-mode gradients of `f` against the fourth-order central
/// difference `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`. Returns the
/// maximum relative error over all coordinates.
///
/// The five-point stencil lets `h` be large enough that rounding in `f`
/// stays well below gradients of order 1e-8 without truncation error taking
/// over; with the two-point stencil those coordinates are noise-dominated.
/// `f` must be smooth within `2h` of `x`.
pub fn grad_check_finite_diff<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)?;
    Ok(report.max_rel_error)
}

/// Multi-input form of [`grad_check_finite_diff`]: every tensor in `xs` is
/// bound as a leaf and perturbed coordinate by coordinate.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(CmusError::Contract(format!("step {step} must be positive")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        tensor: 0,
        coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = xs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for ci in 0..work[ti].len() {
            let orig = work[ti].data()[ci];
            let mut at = |offset: f64| -> Result<f64> {
                work[ti].data_mut()[ci] = orig + offset;
                eval(&work)
            };
            let numeric = central_difference(&mut at, step)?;
            work[ti].data_mut()[ci] = orig;
            let a = grad.data()[ci];
            let err = rel_error(a, numeric);
            if err > report.max_rel_error || !err.is_finite() {
                report = GradCheckReport {
                    max_rel_error: err,
                    tensor: ti,
                    coord: ci,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
