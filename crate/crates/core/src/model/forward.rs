use std::sync::Arc;

use super::params::{BlockParams, BoundParams, ConvParams, PhaseParams, RdfNetParams};
use super::TauMode;
use crate::error::{Error, Result};
use crate::fista::{self, MomentumRule};
use crate::optics::CassiOperator;
use crate::tensor::{LinearOperator, Tape, Var};

/// Iterates carried between phases.
#[derive(Clone, Copy, Debug)]
pub struct PhaseState {
    pub x_prev: Var,
    pub x: Var,
    pub z: Var,
    pub t: f64,
}

/// Per-phase values the losses and weight export read back.
#[derive(Clone, Debug)]
pub struct PhaseTrace {
    pub r: Var,
    /// Embedded features, the common input of every dynamic block.
    pub rc: Var,
    /// `F_i(rc)` per block.
    pub transforms: Vec<Var>,
    pub taus: Vec<Var>,
    pub block_outputs: Vec<Var>,
    /// `[B, N, H, W]` region weights after upsampling.
    pub weights: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct Intermediates {
    pub phases: Vec<PhaseTrace>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub x0: Var,
    pub output: Var,
    pub phase_outputs: Vec<Var>,
    intermediates: Option<Intermediates>,
}

impl ModelOutput {
    pub fn intermediates(&self) -> Result<&Intermediates> {
        self.intermediates.as_ref().ok_or(Error::MissingIntermediates("model_forward ran without retaining intermediates"))
    }
}

fn conv(tape: &mut Tape, bound: &BoundParams, p: &ConvParams, x: Var) -> Result<Var> {
    tape.conv2d(x, bound[p.weight], bound[p.bias], p.padding)
}

/// Two convs with a ReLU between them.
fn conv_pair(tape: &mut Tape, bound: &BoundParams, p: &[ConvParams; 2], x: Var) -> Result<Var> {
    let h = conv(tape, bound, &p[0], x)?;
    let h = tape.relu(h)?;
    conv(tape, bound, &p[1], h)
}

/// Gradient step on the measurement in tensor form: `R = z - rho Phi^T (Phi z - y)`.
/// Returns `R` and the next momentum value.
pub fn pretreatment(tape: &mut Tape, z: Var, t: f64, y: Var, op: &Arc<CassiOperator>, rho: Var) -> Result<(Var, f64)> {
    let map: Arc<dyn LinearOperator> = op.clone();
    let phi_z = tape.linear(z, map.clone(), false)?;
    let residual = tape.sub(phi_z, y)?;
    let back = tape.linear(residual, map, true)?;
    let step = tape.scale_by(back, rho)?;
    let r = tape.sub(z, step)?;
    Ok((r, fista::momentum_update(t)?))
}

pub fn embed(tape: &mut Tape, bound: &BoundParams, phase: &PhaseParams, r: Var) -> Result<Var> {
    conv(tape, bound, &phase.embed, r)
}

/// `F'(F(x))` for one block.
pub fn transform_pair(tape: &mut Tape, bound: &BoundParams, block: &BlockParams, x: Var) -> Result<Var> {
    let f = conv_pair(tape, bound, &block.f, x)?;
    inverse_transform(tape, bound, block, f)
}

/// `F'(coeffs)` without the shrinkage or skip path.
pub fn inverse_transform(tape: &mut Tape, bound: &BoundParams, block: &BlockParams, coeffs: Var) -> Result<Var> {
    conv_pair(tape, bound, &block.f_inv, coeffs)
}

/// `F_inv(soft(F(rc), tau)) + rc`. Returns the output, `F(rc)` and `tau`.
pub fn dynamic_block(tape: &mut Tape, bound: &BoundParams, block: &BlockParams, rc: Var, tau_mode: TauMode) -> Result<(Var, Var, Var)> {
    let f = conv_pair(tape, bound, &block.f, rc)?;
    let tau = match tau_mode {
        TauMode::Learned => {
            let logits = conv_pair(tape, bound, &block.thresh, rc)?;
            tape.logistic(logits)?
        }
        TauMode::Fixed => {
            let tau0 = tape.logistic(bound[block.tau_logit])?;
            let shape = tape.shape(f).to_vec();
            tape.broadcast(tau0, &shape)?
        }
    };
    let shrunk = tape.soft_threshold(f, tau)?;
    let back = conv_pair(tape, bound, &block.f_inv, shrunk)?;
    let out = tape.add(back, rc)?;
    Ok((out, f, tau))
}

/// Softmax scores over blocks computed on `size x size` pooled regions and
/// broadcast back to full resolution: `[B, N, H, W]`.
pub fn region_weights(tape: &mut Tape, bound: &BoundParams, phase: &PhaseParams, rc: Var, size: usize) -> Result<Var> {
    let (_, _, h, w) = tape.value(rc).dims4()?;
    let pooled = tape.avg_pool(rc, size)?;
    let logits = conv_pair(tape, bound, &phase.score, pooled)?;
    let weights = tape.softmax_over_channels(logits)?;
    tape.nearest_upsample(weights, h, w, size)
}

/// One unfolded iteration.
pub fn phase_forward(
    tape: &mut Tape,
    params: &RdfNetParams,
    bound: &BoundParams,
    phase: &PhaseParams,
    state: PhaseState,
    y: Var,
    op: &Arc<CassiOperator>,
) -> Result<(PhaseState, PhaseTrace)> {
    let cfg = params.config();
    let rho = tape.exp(bound[phase.log_rho])?;
    let (r, t_next) = pretreatment(tape, state.z, state.t, y, op, rho)?;
    let rc = embed(tape, bound, phase, r)?;

    let mut transforms = Vec::with_capacity(phase.blocks.len());
    let mut taus = Vec::with_capacity(phase.blocks.len());
    let mut block_outputs = Vec::with_capacity(phase.blocks.len());
    for block in &phase.blocks {
        let (out, f, tau) = dynamic_block(tape, bound, block, rc, cfg.tau_mode)?;
        block_outputs.push(out);
        transforms.push(f);
        taus.push(tau);
    }

    let weights = region_weights(tape, bound, phase, rc, cfg.pool_size)?;
    let mut mixed: Option<Var> = None;
    for (i, out) in block_outputs.iter().enumerate() {
        let w_i = tape.channel_slice(weights, i)?;
        let term = tape.mul_channel(*out, w_i)?;
        mixed = Some(match mixed {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let mixed = mixed.ok_or_else(|| Error::Config("phase has no dynamic blocks".into()))?;
    let output = conv(tape, bound, &phase.project, mixed)?;

    let z = extrapolate_on_tape(tape, output, state.x, state.t, cfg.momentum_rule)?;
    let next = PhaseState { x_prev: state.x, x: output, z, t: t_next };
    Ok((next, PhaseTrace { r, rc, transforms, taus, block_outputs, weights, output }))
}

fn extrapolate_on_tape(tape: &mut Tape, x: Var, x_prev: Var, t: f64, rule: MomentumRule) -> Result<Var> {
    let c = fista::extrapolation_coefficient(t, rule)?;
    if c == 0.0 {
        return Ok(x);
    }
    let diff = tape.sub(x, x_prev)?;
    let step = tape.scale(diff, c)?;
    tape.add(x, step)
}

/// Runs every phase on a batch of frames (`[B, 1, H, W + step (L - 1)]`).
pub fn model_forward(
    tape: &mut Tape,
    params: &RdfNetParams,
    bound: &BoundParams,
    frames: Var,
    op: &Arc<CassiOperator>,
    retain_intermediates: bool,
) -> Result<ModelOutput> {
    let cfg = params.config();
    if op.masks().n_lambda() != cfg.in_bands {
        return Err(Error::dim(format!(
            "model expects {} bands, mask stack has {}",
            cfg.in_bands,
            op.masks().n_lambda()
        )));
    }
    let x0_value = op.split_batch(tape.value(frames), cfg.init)?;
    let x0 = tape.constant(x0_value);
    let mut state = PhaseState { x_prev: x0, x: x0, z: x0, t: 1.0 };
    let mut traces = Vec::with_capacity(cfg.phases);
    let mut phase_outputs = Vec::with_capacity(cfg.phases);
    for phase in params.phases() {
        let (next, trace) = phase_forward(tape, params, bound, phase, state, frames, op)?;
        phase_outputs.push(trace.output);
        traces.push(trace);
        state = next;
    }
    Ok(ModelOutput {
        x0,
        output: state.x,
        phase_outputs,
        intermediates: retain_intermediates.then_some(Intermediates { phases: traces }),
    })
}

/// Per-phase maps of one batch item, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMaps {
    pub phase: usize,
    pub height: usize,
    pub width: usize,
    /// Region weight per block, row-major `height x width`.
    pub weights: Vec<Vec<f64>>,
    /// Channel-averaged threshold per block.
    pub taus: Vec<Vec<f64>>,
}

pub fn export_region_weights(tape: &Tape, out: &ModelOutput, item: usize) -> Result<Vec<PhaseMaps>> {
    let inter = out.intermediates()?;
    let mut maps = Vec::with_capacity(inter.phases.len());
    for (k, trace) in inter.phases.iter().enumerate() {
        let w = tape.value(trace.weights);
        let (b, n, h, wd) = w.dims4()?;
        if item >= b {
            return Err(Error::dim(format!("batch item {item} out of {b}")));
        }
        let plane = h * wd;
        let weights = (0..n).map(|i| w.data()[(item * n + i) * plane..][..plane].to_vec()).collect();
        let taus = trace
            .taus
            .iter()
            .map(|t| {
                let tv = tape.value(*t);
                let c = tv.shape()[1];
                let base = item * c * plane;
                (0..plane).map(|p| (0..c).map(|ch| tv.data()[base + ch * plane + p]).sum::<f64>() / c as f64).collect()
            })
            .collect();
        maps.push(PhaseMaps { phase: k, height: h, width: wd, weights, taus });
    }
    Ok(maps)
}
