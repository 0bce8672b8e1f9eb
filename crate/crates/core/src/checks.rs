//! Finite-difference gradient suite over every differentiable op and the
//! end-to-end training loss of a tiny network.

use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{model_forward, BoundParams, RdfNetConfig, RdfNetParams};
use crate::optics::{simulate, DispersionSpec, InitMode, Mask, MaskStack, Measurement, SpectralCube};
use crate::tensor::{grad_check_multi, LinearOperator, Tape, Tensor, Var};
use crate::train::{compute_losses, synthetic_cube, LossWeights};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Values bounded away from zero, so kinks at the origin are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

type Case = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>, Vec<Tensor>);

/// Weighted sum so every output element carries a distinct cotangent.
fn probe(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let s4 = [2, 3, 4, 5];
    let w4 = uniform(rng, &s4, -1.0, 1.0);
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! unary {
        ($name:expr, $input:expr, $body:expr) => {{
            let w = w4.clone();
            let body = $body;
            cases.push(($name, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = body(t, v[0])?;
                probe(t, y, &w)
            }), vec![$input]));
        }};
    }
    unary!("relu", away_from_zero(rng, &s4), |t: &mut Tape, x| t.relu(x));
    unary!("abs", away_from_zero(rng, &s4), |t: &mut Tape, x| t.abs(x));
    unary!("logistic", uniform(rng, &s4, -3.0, 3.0), |t: &mut Tape, x| t.logistic(x));
    unary!("exp", uniform(rng, &s4, -1.0, 1.0), |t: &mut Tape, x| t.exp(x));
    unary!("scale", uniform(rng, &s4, -1.0, 1.0), |t: &mut Tape, x| t.scale(x, -1.7));
    unary!("softmax_over_channels", uniform(rng, &s4, -2.0, 2.0), |t: &mut Tape, x| t.softmax_over_channels(x));
    let w_slice = uniform(rng, &[2, 1, 4, 5], -1.0, 1.0);
    cases.push(("channel_slice", Box::new(move |t, v| {
        let y = t.channel_slice(v[0], 1)?;
        probe(t, y, &w_slice)
    }), vec![uniform(rng, &s4, -1.0, 1.0)]));
    let w_pool = uniform(rng, &[2, 3, 2, 2], -1.0, 1.0);
    cases.push(("avg_pool", Box::new(move |t, v| {
        let y = t.avg_pool(v[0], 3)?;
        probe(t, y, &w_pool)
    }), vec![uniform(rng, &s4, -1.0, 1.0)]));
    let w_up = uniform(rng, &[2, 3, 5, 7], -1.0, 1.0);
    cases.push(("nearest_upsample", Box::new(move |t, v| {
        let y = t.nearest_upsample(v[0], 5, 7, 3)?;
        probe(t, y, &w_up)
    }), vec![uniform(rng, &[2, 3, 2, 3], -1.0, 1.0)]));

    for (name, f) in [
        ("add", (|t: &mut Tape, a, b| t.add(a, b)) as fn(&mut Tape, Var, Var) -> Result<Var>),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
    ] {
        let w = w4.clone();
        cases.push((name, Box::new(move |t, v| {
            let y = f(t, v[0], v[1])?;
            probe(t, y, &w)
        }), vec![uniform(rng, &s4, -1.0, 1.0), uniform(rng, &s4, -1.0, 1.0)]));
    }
    for (name, f) in [
        ("sum", (|t: &mut Tape, x| t.sum(x)) as fn(&mut Tape, Var) -> Result<Var>),
        ("mean", |t, x| t.mean(x)),
        ("l1_norm", |t, x| t.l1_norm(x)),
        ("l2_norm_sq", |t, x| t.l2_norm_sq(x)),
    ] {
        cases.push((name, Box::new(move |t, v| f(t, v[0])), vec![away_from_zero(rng, &s4)]));
    }

    // Thresholds in (0, 0.15), inputs at least 0.2 from zero: never at a kink.
    let w = w4.clone();
    cases.push(("soft_threshold", Box::new(move |t, v| {
        let y = t.soft_threshold(v[0], v[1])?;
        probe(t, y, &w)
    }), vec![away_from_zero(rng, &s4), uniform(rng, &s4, 0.01, 0.15)]));

    let w_conv = uniform(rng, &[2, 4, 5, 6], -1.0, 1.0);
    cases.push(("conv2d", Box::new(move |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1)?;
        probe(t, y, &w_conv)
    }), vec![uniform(rng, &[2, 3, 5, 6], -1.0, 1.0), uniform(rng, &[4, 3, 3, 3], -0.5, 0.5), uniform(rng, &[4], -0.5, 0.5)]));

    let w = w4.clone();
    cases.push(("scale_by", Box::new(move |t, v| {
        let y = t.scale_by(v[0], v[1])?;
        probe(t, y, &w)
    }), vec![uniform(rng, &s4, -1.0, 1.0), Tensor::scalar(0.7)]));
    let w = w4.clone();
    cases.push(("broadcast", Box::new(move |t, v| {
        let y = t.broadcast(v[0], &[2, 3, 4, 5])?;
        probe(t, y, &w)
    }), vec![Tensor::scalar(0.3)]));
    let w = w4.clone();
    cases.push(("mul_channel", Box::new(move |t, v| {
        let y = t.mul_channel(v[0], v[1])?;
        probe(t, y, &w)
    }), vec![uniform(rng, &s4, -1.0, 1.0), uniform(rng, &[2, 1, 4, 5], -1.0, 1.0)]));

    let mask = Mask::random_binary(4, 5, 0.5, rng).expect("valid mask");
    let masks = MaskStack::new(mask, DispersionSpec::default(), 3).expect("valid stack");
    let op: Arc<dyn LinearOperator> = masks.operator();
    let w_fwd = uniform(rng, &[2, 1, 4, 7], -1.0, 1.0);
    let fwd = op.clone();
    cases.push(("sensing_forward", Box::new(move |t, v| {
        let y = t.linear(v[0], fwd.clone(), false)?;
        probe(t, y, &w_fwd)
    }), vec![uniform(rng, &[2, 3, 4, 5], -1.0, 1.0)]));
    let w_adj = uniform(rng, &[2, 3, 4, 5], -1.0, 1.0);
    cases.push(("sensing_adjoint", Box::new(move |t, v| {
        let y = t.linear(v[0], op.clone(), true)?;
        probe(t, y, &w_adj)
    }), vec![uniform(rng, &[2, 1, 4, 7], -1.0, 1.0)]));
    cases
}

/// The tiny end-to-end instance: one 8x8x4 scene, K=2 phases, N=2 blocks.
pub fn tiny_instance(seed: u64) -> Result<(RdfNetParams, MaskStack, Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RdfNetConfig { phases: 2, blocks: 2, pool_size: 3, in_bands: 4, feat_channels: 4, init: InitMode::Normalized, ..RdfNetConfig::default() };
    let masks = MaskStack::new(Mask::random_binary(8, 8, 0.5, &mut rng)?, DispersionSpec::default(), 4)?;
    let rho = cfg.resolve_rho(&masks)?;
    let mut params = RdfNetParams::init(&cfg, rho, &mut rng)?;
    // Zero biases put ReLU inputs exactly on the kink wherever a soft threshold
    // zeroes a whole neighbourhood.
    let ids: Vec<_> = params.store().ids().filter(|&id| params.store().name(id).ends_with(".bias")).collect();
    for id in ids {
        for v in params.store_mut().get_mut(id).data_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
    }
    let cube = synthetic_cube(8, 8, 4, &mut rng)?;
    let meas = simulate(&cube, &masks, 0.0, &mut rng)?;
    Ok((params, masks, Measurement::stack(&[&meas])?, SpectralCube::stack(&[&cube])?))
}

/// Total loss of the tiny instance as a function of every parameter tensor.
pub fn end_to_end_loss(params: &RdfNetParams, masks: &MaskStack, frames: &Tensor, gt: &Tensor) -> impl Fn(&mut Tape, &[Var]) -> Result<Var> {
    let params = params.clone();
    let op = masks.operator();
    let (frames, gt) = (frames.clone(), gt.clone());
    move |tape: &mut Tape, vars: &[Var]| {
        let bound = BoundParams::from_vars(&params, vars.to_vec())?;
        let y = tape.constant(frames.clone());
        let g = tape.constant(gt.clone());
        let out = model_forward(tape, &params, &bound, y, &op, true)?;
        let (total, _) = compute_losses(tape, &params, &bound, &out, g, &LossWeights::default(), false)?;
        Ok(total)
    }
}

/// Runs every op case and the end-to-end loss; one entry per case.
pub fn gradient_suite(seed: u64, h: f64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, f, inputs) in op_cases(&mut rng) {
        let r = grad_check_multi(f, &inputs, h)?;
        out.push(GradCheckEntry { name: name.to_string(), max_rel_error: r.max_rel_error, coordinates: r.coordinates });
    }
    let (params, masks, frames, gt) = tiny_instance(seed)?;
    let inputs: Vec<Tensor> = params.store().iter().map(|(_, t)| t.clone()).collect();
    let r = grad_check_multi(end_to_end_loss(&params, &masks, &frames, &gt), &inputs, h)?;
    out.push(GradCheckEntry { name: "end_to_end_total_loss".into(), max_rel_error: r.max_rel_error, coordinates: r.coordinates });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let report = gradient_suite(3, DEFAULT_STEP).unwrap();
        for e in &report {
            assert!(e.max_rel_error <= DEFAULT_TOLERANCE, "{} rel error {}", e.name, e.max_rel_error);
            assert!(e.coordinates > 0);
        }
        assert!(report.iter().any(|e| e.name == "end_to_end_total_loss"));
    }
}
