//! ISTA/FISTA reconstruction with a fixed orthonormal sparsifying transform.

use std::fmt;
use std::str::FromStr;

use crate::dct::Dct2d;
use crate::error::{Error, Result};
use crate::optics::{self, InitMode, MaskStack, Measurement, SpectralCube};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// Per-band 2-D orthonormal DCT-II.
    Dct,
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Transform::Identity),
            "dct" => Ok(Transform::Dct),
            _ => Err(Error::Config(format!("unknown transform {s:?} (identity|dct)"))),
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transform::Identity => "identity",
            Transform::Dct => "dct",
        })
    }
}

/// How the extrapolation weight is derived from the momentum sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MomentumRule {
    /// `(t_k - 1) / (t_k + 1)`
    #[default]
    Single,
    /// `(t_k - 1) / t_{k+1}`
    Classical,
}

impl FromStr for MomentumRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(MomentumRule::Single),
            "classical" => Ok(MomentumRule::Classical),
            _ => Err(Error::Config(format!("unknown momentum rule {s:?} (single|classical)"))),
        }
    }
}

impl fmt::Display for MomentumRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MomentumRule::Single => "single",
            MomentumRule::Classical => "classical",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub rho: f64,
    pub lambda: f64,
    pub max_iters: usize,
    pub transform: Transform,
    pub momentum_rule: MomentumRule,
    /// `false` runs plain ISTA (no extrapolation).
    pub accelerated: bool,
    pub init: InitMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rho: 1.0,
            lambda: 1e-3,
            max_iters: 100,
            transform: Transform::Dct,
            momentum_rule: MomentumRule::Single,
            accelerated: true,
            init: InitMode::Split,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Iterate bundle of the four-step loop.
#[derive(Clone, Debug)]
pub struct IterState {
    pub x_prev: SpectralCube,
    pub x: SpectralCube,
    pub z: SpectralCube,
    pub t: f64,
    pub k: usize,
}

impl IterState {
    /// `z = x = x_prev = x0`, `t = 1`, `k = 1`.
    pub fn start(x0: SpectralCube) -> Self {
        IterState { x_prev: x0.clone(), x: x0.clone(), z: x0, t: 1.0, k: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub cube: SpectralCube,
    pub trace: Vec<IterRecord>,
}

/// `r = z - rho * Phi^T (Phi z - y)`.
pub fn gradient_step(z: &SpectralCube, y: &Measurement, masks: &MaskStack, rho: f64) -> Result<SpectralCube> {
    let residual = optics::forward(z, masks)?.sub(y)?;
    z.axpy(-rho, &optics::adjoint(&residual, masks)?)
}

/// `t' = (1 + sqrt(1 + 4 t^2)) / 2`.
pub fn momentum_update(t: f64) -> Result<f64> {
    if !(t >= 1.0) {
        return Err(Error::domain(format!("momentum t must be at least 1, got {t}")));
    }
    Ok((1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0)
}

pub fn extrapolation_coefficient(t: f64, rule: MomentumRule) -> Result<f64> {
    match rule {
        MomentumRule::Single => {
            if !(t >= 1.0) {
                return Err(Error::domain(format!("momentum t must be at least 1, got {t}")));
            }
            Ok((t - 1.0) / (t + 1.0))
        }
        MomentumRule::Classical => Ok((t - 1.0) / momentum_update(t)?),
    }
}

/// `z = x + c (x - x_prev)` with `c` from [`extrapolation_coefficient`].
pub fn extrapolate(x: &SpectralCube, x_prev: &SpectralCube, t: f64, rule: MomentumRule) -> Result<SpectralCube> {
    let c = extrapolation_coefficient(t, rule)?;
    let step = x.axpy(-1.0, x_prev)?;
    x.axpy(c, &step)
}

fn soft(v: f64, tau: f64) -> f64 {
    v.signum() * (v.abs() - tau).max(0.0)
}

/// Sparsifying transform bound to one plane size.
#[derive(Clone, Debug)]
pub struct TransformPlan {
    kind: Transform,
    dct: Option<Dct2d>,
}

impl TransformPlan {
    pub fn new(kind: Transform, nx: usize, ny: usize) -> Self {
        let dct = matches!(kind, Transform::Dct).then(|| Dct2d::new(nx, ny));
        TransformPlan { kind, dct }
    }

    pub fn kind(&self) -> Transform {
        self.kind
    }

    pub fn forward(&self, cube: &SpectralCube) -> SpectralCube {
        match &self.dct {
            Some(d) => d.forward(cube),
            None => cube.clone(),
        }
    }

    pub fn inverse(&self, coeffs: &SpectralCube) -> SpectralCube {
        match &self.dct {
            Some(d) => d.inverse(coeffs),
            None => coeffs.clone(),
        }
    }
}

/// Proximal map of `threshold * ||Psi x||_1` for orthonormal `Psi`.
pub fn prox_sparse(r: &SpectralCube, threshold: f64, plan: &TransformPlan) -> Result<SpectralCube> {
    if !(threshold >= 0.0) {
        return Err(Error::domain(format!("negative threshold {threshold}")));
    }
    if threshold == 0.0 {
        return Ok(r.clone());
    }
    let mut coeffs = plan.forward(r);
    for v in coeffs.data_mut() {
        *v = soft(*v, threshold);
    }
    Ok(plan.inverse(&coeffs))
}

/// `1/2 ||y - Phi x||^2 + lambda ||Psi x||_1`, plus the residual norm.
pub fn objective(x: &SpectralCube, y: &Measurement, masks: &MaskStack, lambda: f64, plan: &TransformPlan) -> Result<(f64, f64)> {
    let res = optics::forward(x, masks)?.sub(y)?.norm_sq();
    let l1: f64 = if lambda > 0.0 { plan.forward(x).data().iter().map(|v| v.abs()).sum() } else { 0.0 };
    Ok((0.5 * res + lambda * l1, res.sqrt()))
}

/// Largest eigenvalue of `Phi^T Phi` by power iteration from a fixed start vector.
pub fn lipschitz_estimate(masks: &MaskStack, iters: usize) -> Result<f64> {
    let n = masks.nx() * masks.ny() * masks.n_lambda();
    let start = (0..n).map(|i| 1.0 + 0.1 * ((i * 2654435761) % 97) as f64 / 97.0).collect();
    let mut v = SpectralCube::new(masks.nx(), masks.ny(), masks.n_lambda(), start)?;
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let norm = v.norm_sq().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = v.scaled(1.0 / norm);
        let w = optics::adjoint(&optics::forward(&v, masks)?, masks)?;
        estimate = v.dot(&w)?;
        v = w;
    }
    Ok(estimate)
}

/// `1 / L` with `L = lambda_max(Phi^T Phi)`. `Phi Phi^T` is diagonal, so `L`
/// is exactly the largest detector gain.
pub fn safe_step_size(masks: &MaskStack) -> Result<f64> {
    let l = masks.detector_gain().into_iter().fold(0.0, f64::max);
    if l <= 0.0 {
        return Err(Error::domain("mask stack blocks every pixel"));
    }
    Ok(1.0 / l)
}

pub fn initial_estimate(y: &Measurement, masks: &MaskStack, mode: InitMode) -> Result<SpectralCube> {
    optics::initial_cube(y, masks, mode)
}

/// Runs the gradient / prox / momentum / extrapolation loop from the split
/// measurement. The prox threshold is `rho * lambda`, so the recorded
/// objective is the one being minimized.
pub fn solve(y: &Measurement, masks: &MaskStack, cfg: &SolverConfig) -> Result<SolveOutput> {
    cfg.validate()?;
    let plan = TransformPlan::new(cfg.transform, masks.nx(), masks.ny());
    let mut state = IterState::start(initial_estimate(y, masks, cfg.init)?);
    let mut trace = Vec::with_capacity(cfg.max_iters);
    while state.k <= cfg.max_iters {
        let r = gradient_step(&state.z, y, masks, cfg.rho)?;
        let x = prox_sparse(&r, cfg.rho * cfg.lambda, &plan)?;
        state.x_prev = std::mem::replace(&mut state.x, x);
        if cfg.accelerated {
            state.z = extrapolate(&state.x, &state.x_prev, state.t, cfg.momentum_rule)?;
            state.t = momentum_update(state.t)?;
        } else {
            state.z = state.x.clone();
        }
        let (objective, residual) = objective(&state.x, y, masks, cfg.lambda, &plan)?;
        if !objective.is_finite() {
            return Err(Error::NonFinite(format!("objective at iteration {}", state.k)));
        }
        trace.push(IterRecord { iter: state.k, objective, residual });
        state.k += 1;
    }
    Ok(SolveOutput { cube: state.x, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{DispersionSpec, Mask};

    #[test]
    fn momentum_values() {
        let t2 = momentum_update(1.0).unwrap();
        assert!((t2 - 1.618034).abs() < 1e-6);
        assert!((momentum_update(t2).unwrap() - 2.193527).abs() < 1e-6);
        assert!(matches!(momentum_update(0.5), Err(Error::Domain(_))));
        let mut t = 1.0;
        for _ in 0..100 {
            let next = momentum_update(t).unwrap();
            assert!(next > t);
            t = next;
        }
    }

    #[test]
    fn extrapolation_first_iteration_and_single_rule() {
        let x = SpectralCube::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let xp = SpectralCube::new(2, 2, 1, vec![0.0, 1.0, 5.0, 4.5]).unwrap();
        for rule in [MomentumRule::Single, MomentumRule::Classical] {
            assert_eq!(extrapolate(&x, &xp, 1.0, rule).unwrap(), x);
            assert_eq!(extrapolate(&x, &x, 2.5, rule).unwrap(), x);
        }
        assert_eq!(extrapolation_coefficient(3.0, MomentumRule::Single).unwrap(), 0.5);
        let z = extrapolate(&x, &xp, 3.0, MomentumRule::Single).unwrap();
        for i in 0..4 {
            let expect = x.data()[i] + 0.5 * (x.data()[i] - xp.data()[i]);
            assert!((z.data()[i] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn prox_identity_table() {
        let r = SpectralCube::new(1, 4, 1, vec![2.0, -2.0, 0.3, -0.3]).unwrap();
        let plan = TransformPlan::new(Transform::Identity, 1, 4);
        assert_eq!(prox_sparse(&r, 0.5, &plan).unwrap().data(), &[1.5, -1.5, 0.0, 0.0]);
        assert_eq!(prox_sparse(&r, 0.0, &plan).unwrap(), r);
    }

    #[test]
    fn gradient_step_fixed_point_and_zero_rho() {
        let masks = MaskStack::new(Mask::new(2, 3, vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap(), DispersionSpec::default(), 2).unwrap();
        let z = SpectralCube::new(2, 3, 2, (0..12).map(|i| i as f64 * 0.3).collect()).unwrap();
        let y = optics::forward(&z, &masks).unwrap();
        assert_eq!(gradient_step(&z, &y, &masks, 0.7).unwrap(), z);
        let y2 = Measurement::new(2, 4, vec![1.0; 8]).unwrap();
        assert_eq!(gradient_step(&z, &y2, &masks, 0.0).unwrap(), z);
    }

    #[test]
    fn zero_measurement_converges_to_zero() {
        let masks = MaskStack::new(Mask::new(3, 3, vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap(), DispersionSpec::default(), 2).unwrap();
        let y = Measurement::new(3, 4, vec![0.0; 12]).unwrap();
        let out = solve(&y, &masks, &SolverConfig { rho: safe_step_size(&masks).unwrap(), ..Default::default() }).unwrap();
        assert!(out.cube.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SolverConfig { rho: 0.0, ..Default::default() },
            SolverConfig { lambda: -1.0, ..Default::default() },
            SolverConfig { max_iters: 0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
