//! Central finite-difference checks for tape gradients.

use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest `|analytic − numeric| / max(|analytic|, 1e-8)` over every element
/// of every input, with the numeric derivative from central differences of
/// step `h`.
///
/// `f` must build a scalar from the given inputs and be a pure function of
/// them.
pub fn finite_diff_check_many<F>(mut f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return invalid("finite_diff_check", "step must be positive");
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for (k, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(1e-8));
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}
