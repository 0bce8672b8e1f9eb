//! Flat `key = value` run configuration shared by every CLI command.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, unknown or repeated keys are rejected, and [`RunConfig::to_text`]
//! writes every key back in a fixed order with round-trip float formatting,
//! so a serialized config doubles as a run manifest.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fista::{self, MomentumRule, SolverConfig, Transform};
use crate::model::{RdfNetConfig, RhoInit, TauMode};
use crate::optics::{InitMode, MaskStack};
use crate::train::{AdamConfig, DatasetSpec, LossWeights, TrainConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub out: PathBuf,

    pub data: DatasetSpec,

    pub cube: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub measurement: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub recon: Vec<PathBuf>,
    pub reference: Vec<PathBuf>,
    pub train_cubes: Vec<PathBuf>,
    pub eval_cubes: Vec<PathBuf>,

    pub lambda: f64,
    /// `None` means the safe step `1 / L` of the mask stack.
    pub solver_rho: Option<f64>,
    pub iters: usize,
    pub transform: Transform,
    pub accelerated: bool,

    pub momentum_rule: MomentumRule,
    pub init: InitMode,

    pub phases: usize,
    pub blocks: usize,
    pub pool_size: usize,
    pub feat_channels: usize,
    pub rho_init: RhoInit,
    pub rho_learnable: bool,
    pub tau_mode: TauMode,

    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub per_phase_supervision: bool,
    pub eval_every: usize,
    pub checkpoint_every: usize,

    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,

    pub pixel_x: usize,
    pub pixel_y: usize,

    pub gradcheck_h: f64,
    pub gradcheck_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = RdfNetConfig::default();
        let solver = SolverConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            command: String::new(),
            seed: 0,
            out: PathBuf::from("out"),
            data: DatasetSpec::default(),
            cube: None,
            mask: None,
            measurement: Vec::new(),
            checkpoint: None,
            recon: Vec::new(),
            reference: Vec::new(),
            train_cubes: Vec::new(),
            eval_cubes: Vec::new(),
            lambda: solver.lambda,
            solver_rho: None,
            iters: solver.max_iters,
            transform: solver.transform,
            accelerated: solver.accelerated,
            momentum_rule: model.momentum_rule,
            init: model.init,
            phases: model.phases,
            blocks: model.blocks,
            pool_size: model.pool_size,
            feat_channels: model.feat_channels,
            rho_init: model.rho_init,
            rho_learnable: model.rho_learnable,
            tau_mode: model.tau_mode,
            epochs: train.epochs,
            batch_size: train.batch_size,
            adam: train.adam,
            loss: train.loss,
            per_phase_supervision: train.per_phase_supervision,
            eval_every: train.eval_every,
            checkpoint_every: train.checkpoint_every,
            variants: vec![Variant::Baseline, Variant::AdaptiveThreshold, Variant::DynamicBlocks, Variant::Full],
            seeds: vec![0, 1, 2],
            pixel_x: 0,
            pixel_y: 0,
            gradcheck_h: crate::checks::DEFAULT_STEP,
            gradcheck_tol: crate::checks::DEFAULT_TOLERANCE,
        }
    }
}

fn path_opt(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: expected {what}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn float(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| bad(key, v, "a number"))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    v.parse().map_err(|_| bad(key, v, "true or false"))
}

impl RunConfig {
    /// Every key with its current value, in manifest order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        vec![
            ("command", self.command.clone()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("nx", d.nx.to_string()),
            ("ny", d.ny.to_string()),
            ("n_lambda", d.n_lambda.to_string()),
            ("n_train", d.n_train.to_string()),
            ("n_eval", d.n_eval.to_string()),
            ("noise_sigma", format!("{:?}", d.noise_sigma)),
            ("mask_p_open", format!("{:?}", d.mask_p_open)),
            ("step_px", d.step_px.to_string()),
            ("ref_band", d.ref_band.to_string()),
            ("data_seed", d.seed.to_string()),
            ("cube", path_opt(&self.cube)),
            ("mask", path_opt(&self.mask)),
            ("measurement", join(&self.measurement, |p| p.display().to_string())),
            ("checkpoint", path_opt(&self.checkpoint)),
            ("recon", join(&self.recon, |p| p.display().to_string())),
            ("reference", join(&self.reference, |p| p.display().to_string())),
            ("train_cubes", join(&self.train_cubes, |p| p.display().to_string())),
            ("eval_cubes", join(&self.eval_cubes, |p| p.display().to_string())),
            ("lambda", format!("{:?}", self.lambda)),
            ("solver_rho", self.solver_rho.map(|r| format!("{r:?}")).unwrap_or_else(|| "auto".into())),
            ("iters", self.iters.to_string()),
            ("transform", self.transform.to_string()),
            ("accelerated", self.accelerated.to_string()),
            ("momentum_rule", self.momentum_rule.to_string()),
            ("init", self.init.to_string()),
            ("phases", self.phases.to_string()),
            ("blocks", self.blocks.to_string()),
            ("pool_size", self.pool_size.to_string()),
            ("feat_channels", self.feat_channels.to_string()),
            (
                "rho_init",
                match self.rho_init {
                    RhoInit::Auto => "auto".into(),
                    RhoInit::Value(v) => format!("{v:?}"),
                },
            ),
            ("rho_learnable", self.rho_learnable.to_string()),
            ("tau_mode", self.tau_mode.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", format!("{:?}", self.adam.lr)),
            ("beta1", format!("{:?}", self.adam.beta1)),
            ("beta2", format!("{:?}", self.adam.beta2)),
            ("eps", format!("{:?}", self.adam.eps)),
            ("alpha", format!("{:?}", self.loss.alpha)),
            ("beta", format!("{:?}", self.loss.beta)),
            ("gamma", format!("{:?}", self.loss.gamma)),
            ("per_phase_supervision", self.per_phase_supervision.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("variants", join(&self.variants, |v| v.to_string())),
            ("seeds", join(&self.seeds, |s| s.to_string())),
            ("pixel_x", self.pixel_x.to_string()),
            ("pixel_y", self.pixel_y.to_string()),
            ("gradcheck_h", format!("{:?}", self.gradcheck_h)),
            ("gradcheck_tol", format!("{:?}", self.gradcheck_tol)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().pairs().into_iter().map(|(k, _)| k).collect()
    }

    /// Assigns one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let path = || (!v.is_empty()).then(|| PathBuf::from(v));
        let paths = || split_list(v).map(PathBuf::from).collect::<Vec<_>>();
        let d = &mut self.data;
        match key {
            "command" => self.command = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "out" => self.out = path().ok_or_else(|| bad(key, v, "a directory"))?,
            "nx" => d.nx = num(key, v)?,
            "ny" => d.ny = num(key, v)?,
            "n_lambda" => d.n_lambda = num(key, v)?,
            "n_train" => d.n_train = num(key, v)?,
            "n_eval" => d.n_eval = num(key, v)?,
            "noise_sigma" => d.noise_sigma = float(key, v)?,
            "mask_p_open" => d.mask_p_open = float(key, v)?,
            "step_px" => d.step_px = num(key, v)?,
            "ref_band" => d.ref_band = num(key, v)?,
            "data_seed" => d.seed = num(key, v)?,
            "cube" => self.cube = path(),
            "mask" => self.mask = path(),
            "measurement" => self.measurement = paths(),
            "checkpoint" => self.checkpoint = path(),
            "recon" => self.recon = paths(),
            "reference" => self.reference = paths(),
            "train_cubes" => self.train_cubes = paths(),
            "eval_cubes" => self.eval_cubes = paths(),
            "lambda" => self.lambda = float(key, v)?,
            "solver_rho" => self.solver_rho = if v == "auto" { None } else { Some(v.parse().map_err(|_| bad(key, v, "auto or a number"))?) },
            "iters" => self.iters = num(key, v)?,
            "transform" => self.transform = v.parse()?,
            "accelerated" => self.accelerated = boolean(key, v)?,
            "momentum_rule" => self.momentum_rule = v.parse()?,
            "init" => self.init = v.parse()?,
            "phases" => self.phases = num(key, v)?,
            "blocks" => self.blocks = num(key, v)?,
            "pool_size" => self.pool_size = num(key, v)?,
            "feat_channels" => self.feat_channels = num(key, v)?,
            "rho_init" => self.rho_init = v.parse()?,
            "rho_learnable" => self.rho_learnable = boolean(key, v)?,
            "tau_mode" => self.tau_mode = v.parse()?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.adam.lr = float(key, v)?,
            "beta1" => self.adam.beta1 = float(key, v)?,
            "beta2" => self.adam.beta2 = float(key, v)?,
            "eps" => self.adam.eps = float(key, v)?,
            "alpha" => self.loss.alpha = float(key, v)?,
            "beta" => self.loss.beta = float(key, v)?,
            "gamma" => self.loss.gamma = float(key, v)?,
            "per_phase_supervision" => self.per_phase_supervision = boolean(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "variants" => self.variants = split_list(v).map(str::parse).collect::<Result<_>>()?,
            "seeds" => self.seeds = split_list(v).map(|s| num(key, s)).collect::<Result<_>>()?,
            "pixel_x" => self.pixel_x = num(key, v)?,
            "pixel_y" => self.pixel_y = num(key, v)?,
            "gradcheck_h" => self.gradcheck_h = float(key, v)?,
            "gradcheck_tol" => self.gradcheck_tol = float(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen: Vec<String> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            let k = k.trim();
            if seen.iter().any(|s| s == k) {
                return Err(Error::Config(format!("line {}: key {k:?} given twice", n + 1)));
            }
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {}", n + 1, e)))?;
            seen.push(k.to_string());
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model(&self) -> RdfNetConfig {
        RdfNetConfig {
            phases: self.phases,
            blocks: self.blocks,
            pool_size: self.pool_size,
            in_bands: self.data.n_lambda,
            feat_channels: self.feat_channels,
            rho_init: self.rho_init,
            rho_learnable: self.rho_learnable,
            tau_mode: self.tau_mode,
            momentum_rule: self.momentum_rule,
            init: self.init,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            model: self.model(),
            loss: self.loss,
            adam: self.adam,
            epochs: self.epochs,
            batch_size: self.batch_size,
            per_phase_supervision: self.per_phase_supervision,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            out_dir: None,
        }
    }

    /// Solver settings with an automatic step resolved against `masks`.
    pub fn solver(&self, masks: &MaskStack) -> Result<SolverConfig> {
        let rho = match self.solver_rho {
            Some(r) => r,
            None => fista::safe_step_size(masks)?,
        };
        let cfg = SolverConfig {
            rho,
            lambda: self.lambda,
            max_iters: self.iters,
            transform: self.transform,
            momentum_rule: self.momentum_rule,
            accelerated: self.accelerated,
            init: self.init,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every value against the invariants of the modules it feeds.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.nx == 0 || d.ny == 0 || d.n_lambda == 0 {
            return Err(Error::Config(format!("scene extent {}x{}x{} must be nonzero", d.nx, d.ny, d.n_lambda)));
        }
        if !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be finite and nonnegative, got {}", d.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&d.mask_p_open) {
            return Err(Error::Config(format!("mask_p_open must lie in [0, 1], got {}", d.mask_p_open)));
        }
        if d.step_px == 0 || d.ref_band >= d.n_lambda {
            return Err(Error::Config(format!("dispersion step {} / reference band {} invalid for {} bands", d.step_px, d.ref_band, d.n_lambda)));
        }
        if let Some(r) = self.solver_rho {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("solver_rho must be positive, got {r}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || self.iters == 0 {
            return Err(Error::Config("lambda must be nonnegative and iters at least 1".into()));
        }
        self.train().validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if !(self.gradcheck_h > 0.0 && self.gradcheck_h.is_finite() && self.gradcheck_tol > 0.0) {
            return Err(Error::Config("gradcheck_h and gradcheck_tol must be positive".into()));
        }
        Ok(())
    }
}
