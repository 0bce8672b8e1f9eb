use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all checked coordinates.
    pub max_rel_error: f64,
    /// Which input and flat index produced the maximum.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares the tape gradient of a scalar function of several inputs against
/// central differences `(f(x + h e) - f(x - h e)) / 2h`, coordinate by coordinate.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), coordinates: 0 };
    for (j, grad) in analytic.iter().enumerate() {
        for k in 0..inputs[j].numel() {
            let orig = inputs[j].data()[k];
            work[j].data_mut()[k] = orig + h;
            let plus = evaluate(&f, &work)?;
            work[j].data_mut()[k] = orig - h;
            let minus = evaluate(&f, &work)?;
            work[j].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (grad.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (j, k);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_multi`]; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h).map(|r| r.max_rel_error)
}
