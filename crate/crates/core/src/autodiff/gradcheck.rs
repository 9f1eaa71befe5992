use crate::error::{Error, Result};

use super::{Tape, Var};

/// A differentiable scalar function of one flat parameter vector.
pub trait Program {
    fn build(&self, tape: &mut Tape, params: Var) -> Result<Var>;
}

impl<F> Program for F
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    fn build(&self, tape: &mut Tape, params: Var) -> Result<Var> {
        self(tape, params)
    }
}

/// Evaluates `program` at `inputs` without recording gradients.
pub fn evaluate<P: Program + ?Sized>(program: &P, inputs: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(inputs.to_vec());
    let out = program.build(&mut tape, x)?;
    scalar_output(&tape, out)
}

/// Value and gradient of `program` at `inputs`.
pub fn forward_and_backward<P: Program + ?Sized>(program: &P, inputs: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let x = tape.param(inputs.to_vec());
    let out = program.build(&mut tape, x)?;
    let value = scalar_output(&tape, out)?;
    if !tape.requires_grad(out) {
        return Ok((value, vec![0.0; inputs.len()]));
    }
    let grads = tape.backward(out)?;
    Ok((value, grads.wrt(x)))
}

fn scalar_output(tape: &Tape, out: Var) -> Result<f64> {
    match tape.value(out) {
        [v] => Ok(*v),
        other => Err(Error::Config(format!("program must return a scalar, got {} values", other.len()))),
    }
}

/// Outcome of a central-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Parameter index with the largest error.
    pub worst_index: Option<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients with `(f(x+h·e) − f(x−h·e)) / 2h` on `subset`.
pub fn finite_difference_check<P: Program + ?Sized>(
    program: &P,
    inputs: &[f64],
    h: f64,
    subset: &[usize],
) -> Result<GradCheck> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {h}")));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= inputs.len()) {
        return Err(Error::InvalidInput(format!(
            "parameter index {bad} out of range for {} inputs",
            inputs.len()
        )));
    }
    let (_, grad) = forward_and_backward(program, inputs)?;
    let mut report = GradCheck {
        checked: 0,
        max_relative_error: 0.0,
        worst_index: None,
        analytic: Vec::with_capacity(subset.len()),
        numeric: Vec::with_capacity(subset.len()),
    };
    let mut x = inputs.to_vec();
    for &i in subset {
        let orig = x[i];
        x[i] = orig + h;
        let fp = evaluate(program, &x)?;
        x[i] = orig - h;
        let fm = evaluate(program, &x)?;
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(grad[i], numeric);
        if report.worst_index.is_none() || err > report.max_relative_error || err.is_nan() {
            report.max_relative_error = err;
            report.worst_index = Some(i);
        }
        report.analytic.push(grad[i]);
        report.numeric.push(numeric);
        report.checked += 1;
    }
    Ok(report)
}
