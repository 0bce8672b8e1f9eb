use std::ops::Index;

use rand::{Rng, RngExt, SeedableRng};

use super::{RdfNetConfig, TauMode};
use crate::error::{Error, FormatError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Flat, ordered, named parameter storage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(Entry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn values_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.value).collect()
    }

    /// Total scalar count over every stored tensor.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Replaces a value, keeping the declared shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {} has shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub f: [ConvParams; 2],
    pub f_inv: [ConvParams; 2],
    pub thresh: [ConvParams; 2],
    /// Logit of the block-wide threshold used in fixed-tau mode.
    pub tau_logit: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhaseParams {
    pub embed: ConvParams,
    pub blocks: Vec<BlockParams>,
    pub score: [ConvParams; 2],
    pub project: ConvParams,
    /// Step size is `exp(log_rho)`.
    pub log_rho: ParamId,
}

/// Every learnable tensor of the network plus the structure that names them.
#[derive(Clone, Debug, PartialEq)]
pub struct RdfNetParams {
    config: RdfNetConfig,
    store: ParamStore,
    phases: Vec<PhaseParams>,
}

/// Small uniform perturbation added on top of the identity-like embed/project init.
const IDENTITY_JITTER: f64 = 0.1;
/// Gain of the last inverse-transform conv, so blocks start close to their skip path.
const RESIDUAL_GAIN: f64 = 0.1;
/// Gain of the threshold subnet's output conv, so learned thresholds start near 0.5.
const THRESH_GAIN: f64 = 0.1;

struct Builder<'r, R: Rng + ?Sized> {
    store: ParamStore,
    rng: &'r mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn uniform(&mut self, n: usize, half_width: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(-half_width..half_width)).collect()
    }

    /// Zero-mean uniform weights with half-width `gain * sqrt(6 / fan_in)`, zero bias.
    fn conv_scaled(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, gain: f64) -> ConvParams {
        let fan_in = in_c * k * k;
        let w = self.uniform(out_c * fan_in, gain * (6.0 / fan_in as f64).sqrt());
        self.conv_from(name, out_c, in_c, k, w)
    }

    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize) -> ConvParams {
        self.conv_scaled(name, out_c, in_c, k, 1.0)
    }

    /// Center-tap identity on the first `min(out_c, in_c)` channels plus a small jitter.
    fn identity_conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize) -> ConvParams {
        let fan_in = in_c * k * k;
        let mut w = self.uniform(out_c * fan_in, IDENTITY_JITTER * (6.0 / fan_in as f64).sqrt());
        let center = (k / 2) * k + k / 2;
        for c in 0..out_c.min(in_c) {
            w[(c * in_c + c) * k * k + center] += 1.0;
        }
        self.conv_from(name, out_c, in_c, k, w)
    }

    fn conv_from(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, w: Vec<f64>) -> ConvParams {
        let weight = self.store.push(format!("{name}.weight"), Tensor::from_parts(vec![out_c, in_c, k, k], w), true);
        let bias = self.store.push(format!("{name}.bias"), Tensor::zeros(vec![out_c]), true);
        ConvParams { weight, bias, padding: k / 2 }
    }
}

impl RdfNetParams {
    /// Fresh parameters; `rho` is the resolved initial step size for every phase.
    pub fn init<R: Rng + ?Sized>(config: &RdfNetConfig, rho: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!("initial step size must be positive, got {rho}")));
        }
        let (l, c, n) = (config.in_bands, config.feat_channels, config.blocks);
        let mut b = Builder { store: ParamStore::default(), rng };
        let mut phases = Vec::with_capacity(config.phases);
        for k in 0..config.phases {
            let p = format!("phase{k}");
            let embed = b.identity_conv(&format!("{p}.embed"), c, l, 3);
            let blocks = (0..n)
                .map(|i| {
                    let q = format!("{p}.block{i}");
                    BlockParams {
                        f: [b.conv(&format!("{q}.f1"), c, c, 3), b.conv(&format!("{q}.f2"), c, c, 3)],
                        f_inv: [b.conv(&format!("{q}.finv1"), c, c, 3), b.conv_scaled(&format!("{q}.finv2"), c, c, 3, RESIDUAL_GAIN)],
                        thresh: [b.conv(&format!("{q}.thresh1"), c, c, 3), b.conv_scaled(&format!("{q}.thresh2"), c, c, 1, THRESH_GAIN)],
                        tau_logit: b.store.push(format!("{q}.tau_logit"), Tensor::scalar(0.0), true),
                    }
                })
                .collect();
            let score = [b.conv(&format!("{p}.score1"), c, c, 3), b.conv(&format!("{p}.score2"), n, c, 1)];
            let project = b.identity_conv(&format!("{p}.project"), l, c, 3);
            let log_rho = b.store.push(format!("{p}.log_rho"), Tensor::scalar(rho.ln()), config.rho_learnable);
            phases.push(PhaseParams { embed, blocks, score, project, log_rho });
        }
        Ok(RdfNetParams { config: config.clone(), store: b.store, phases })
    }

    pub fn config(&self) -> &RdfNetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn phases(&self) -> &[PhaseParams] {
        &self.phases
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Parameters that can receive a gradient in the configured tau mode.
    pub fn is_used(&self, id: ParamId) -> bool {
        let thresh_ids = || {
            self.phases
                .iter()
                .flat_map(|p| p.blocks.iter())
                .flat_map(|b| b.thresh.iter().flat_map(|c| [c.weight, c.bias]))
        };
        match self.config.tau_mode {
            TauMode::Learned => !self.phases.iter().flat_map(|p| p.blocks.iter()).any(|b| b.tau_logit == id),
            TauMode::Fixed => !thresh_ids().any(|t| t == id),
        }
    }

    /// Registers every parameter on the tape; trainable ones as variables.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .store
            .entries
            .iter()
            .map(|e| if e.trainable { tape.variable(e.value.clone()) } else { tape.constant(e.value.clone()) })
            .collect();
        BoundParams { vars }
    }
}

impl RdfNetParams {
    /// Registers every parameter as a constant, for inference.
    pub fn bind_constants(&self, tape: &mut Tape) -> BoundParams {
        BoundParams { vars: self.store.entries.iter().map(|e| tape.constant(e.value.clone())).collect() }
    }

    /// Rebuilds parameters from named tensors; every name the config implies
    /// must appear exactly once, with the expected shape.
    pub fn from_named(config: &RdfNetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = Self::init(config, 1.0, &mut rng)?;
        let mut seen = vec![false; params.store.len()];
        for (name, value) in named {
            let id = params.store.find(&name).ok_or_else(|| FormatError::UnexpectedParameter(name.clone()))?;
            if std::mem::replace(&mut seen[id.0], true) {
                return Err(FormatError::DuplicateParameter(name).into());
            }
            if !value.all_finite() {
                return Err(FormatError::NonFinite(name).into());
            }
            params.store.set(id, value)?;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(FormatError::MissingParameter(params.store.entries[i].name.clone()).into());
        }
        Ok(params)
    }
}

/// Tape handles for a bound [`RdfNetParams`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Uses caller-created tape handles, one per store entry in store order.
    pub fn from_vars(params: &RdfNetParams, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != params.store.len() {
            return Err(Error::dim(format!("{} handles for {} parameters", vars.len(), params.store.len())));
        }
        Ok(BoundParams { vars })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for BoundParams {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
