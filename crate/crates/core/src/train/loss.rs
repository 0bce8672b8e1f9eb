use crate::error::{Error, Result};
use crate::model::{inverse_transform, BoundParams, ModelOutput, RdfNetParams};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 0.01, gamma: 0.001 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub acc: f64,
    pub spa: f64,
    pub sym: f64,
    pub total: f64,
}

fn batch_of(tape: &Tape, v: Var) -> Result<f64> {
    Ok(tape.value(v).dims4()?.0 as f64)
}

/// `||x - gt||^2` summed over elements, averaged over the batch.
pub fn loss_acc(tape: &mut Tape, x: Var, gt: Var) -> Result<Var> {
    let b = batch_of(tape, x)?;
    let diff = tape.sub(x, gt)?;
    let sq = tape.l2_norm_sq(diff)?;
    tape.scale(sq, 1.0 / b)
}

fn sum_all(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let mut iter = terms.into_iter();
    let first = iter.next().ok_or_else(|| Error::Graph("empty loss sum".into()))?;
    iter.try_fold(first, |acc, t| tape.add(acc, t))
}

/// Mean over phases of `sum_i ||F'_i(F_i(Rc)) - Rc||^2`, batch-averaged.
pub fn loss_sym(tape: &mut Tape, params: &RdfNetParams, bound: &BoundParams, out: &ModelOutput) -> Result<Var> {
    let inter = out.intermediates()?;
    let mut terms = Vec::new();
    for (trace, phase) in inter.phases.iter().zip(params.phases()) {
        for (f, block) in trace.transforms.iter().zip(&phase.blocks) {
            let back = inverse_transform(tape, bound, block, *f)?;
            let diff = tape.sub(back, trace.rc)?;
            terms.push(tape.l2_norm_sq(diff)?);
        }
    }
    let k = inter.phases.len() as f64;
    let b = batch_of(tape, inter.phases[0].rc)?;
    let total = sum_all(tape, terms)?;
    tape.scale(total, 1.0 / (k * b))
}

/// Mean over phases of `|| sum_i w_i * F_i(Rc) ||_1`, batch-averaged.
pub fn loss_spa(tape: &mut Tape, out: &ModelOutput) -> Result<Var> {
    let inter = out.intermediates()?;
    let mut terms = Vec::new();
    for trace in &inter.phases {
        let mut mixed = Vec::with_capacity(trace.transforms.len());
        for (i, f) in trace.transforms.iter().enumerate() {
            let w = tape.channel_slice(trace.weights, i)?;
            mixed.push(tape.mul_channel(*f, w)?);
        }
        let agg = sum_all(tape, mixed)?;
        terms.push(tape.l1_norm(agg)?);
    }
    let k = inter.phases.len() as f64;
    let b = batch_of(tape, inter.phases[0].rc)?;
    let total = sum_all(tape, terms)?;
    tape.scale(total, 1.0 / (k * b))
}

pub fn loss_total(tape: &mut Tape, acc: Var, spa: Var, sym: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(acc, w.alpha)?;
    let s = tape.scale(spa, w.beta)?;
    let y = tape.scale(sym, w.gamma)?;
    let t = tape.add(a, s)?;
    tape.add(t, y)
}

/// Assembles all three terms. With `per_phase` set, the accuracy term is the
/// mean over every phase output instead of the final one.
pub fn compute_losses(
    tape: &mut Tape,
    params: &RdfNetParams,
    bound: &BoundParams,
    out: &ModelOutput,
    gt: Var,
    weights: &LossWeights,
    per_phase: bool,
) -> Result<(Var, LossValues)> {
    let acc = if per_phase {
        let terms = out.phase_outputs.iter().map(|x| loss_acc(tape, *x, gt)).collect::<Result<Vec<_>>>()?;
        let n = terms.len() as f64;
        let s = sum_all(tape, terms)?;
        tape.scale(s, 1.0 / n)?
    } else {
        loss_acc(tape, out.output, gt)?
    };
    let spa = loss_spa(tape, out)?;
    let sym = loss_sym(tape, params, bound, out)?;
    let total = loss_total(tape, acc, spa, sym, weights)?;
    let item = |v: Var| tape.value(v).item();
    let values = LossValues { acc: item(acc)?, spa: item(spa)?, sym: item(sym)?, total: item(total)? };
    Ok((total, values))
}
