//! Central finite-difference verification of tape gradients.

use crate::error::NumericsError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst relative disagreement between analytic gradients and central finite
/// differences of the scalar produced by `f`, over every coordinate of every
/// input: `max |analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check_multi<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(NumericsError::NotScalar(tape.value(loss).shape().to_vec()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        for c in 0..grad.len() {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[c] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (grad[c] - numeric).abs() / grad[c].abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`finite_diff_check_multi`].
pub fn finite_diff_check<F>(f: &F, input: &Tensor, h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumericsError>,
{
    finite_diff_check_multi(&|tape: &mut Tape, vars: &[Var]| f(tape, vars[0]), &[input.clone()], h)
}
