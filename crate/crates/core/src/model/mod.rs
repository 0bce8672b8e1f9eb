//! Unfolded regional dynamic FISTA network.
//!
//! Each phase takes a gradient step against the measurement, lifts the bands
//! into a feature space, runs `N` parallel transform/shrink/inverse blocks,
//! mixes them with region-wise softmax weights, and projects back to bands.

mod forward;
mod params;

pub use forward::{
    dynamic_block, embed, export_region_weights, inverse_transform, model_forward, phase_forward, pretreatment, region_weights, transform_pair, Intermediates, ModelOutput,
    PhaseMaps, PhaseState, PhaseTrace,
};
pub use params::{BlockParams, BoundParams, ConvParams, ParamId, ParamStore, PhaseParams, RdfNetParams};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fista::{self, MomentumRule};
use crate::optics::{InitMode, MaskStack};

/// Source of the shrinkage thresholds inside each dynamic block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TauMode {
    /// Per pixel and channel, predicted by the threshold subnet.
    #[default]
    Learned,
    /// One learnable scalar per block, broadcast everywhere.
    Fixed,
}

impl FromStr for TauMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(TauMode::Learned),
            "fixed" => Ok(TauMode::Fixed),
            _ => Err(Error::Config(format!("unknown tau mode {s:?} (learned|fixed)"))),
        }
    }
}

impl fmt::Display for TauMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TauMode::Learned => "learned",
            TauMode::Fixed => "fixed",
        })
    }
}

/// Initial per-phase step size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RhoInit {
    /// `1 / lambda_max(Phi^T Phi)` of the mask stack the model is built for.
    Auto,
    Value(f64),
}

impl FromStr for RhoInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(RhoInit::Auto);
        }
        s.parse::<f64>()
            .map(RhoInit::Value)
            .map_err(|_| Error::Config(format!("rho_init must be 'auto' or a number, got {s:?}")))
    }
}

impl fmt::Display for RhoInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RhoInit::Auto => f.write_str("auto"),
            RhoInit::Value(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdfNetConfig {
    pub phases: usize,
    pub blocks: usize,
    pub pool_size: usize,
    pub in_bands: usize,
    pub feat_channels: usize,
    pub rho_init: RhoInit,
    pub rho_learnable: bool,
    pub tau_mode: TauMode,
    pub momentum_rule: MomentumRule,
    pub init: InitMode,
}

impl Default for RdfNetConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        RdfNetConfig {
            phases: 5,
            blocks: 3,
            pool_size: 5,
            in_bands: 8,
            feat_channels: 16,
            rho_init: RhoInit::Auto,
            rho_learnable: true,
            tau_mode: TauMode::Learned,
            momentum_rule: MomentumRule::Single,
            init: InitMode::Split,
        }
    }
}

impl RdfNetConfig {
    /// Full-scale dimensions (28 bands lifted to 64 features).
    pub fn full_scale() -> Self {
        RdfNetConfig { in_bands: 28, feat_channels: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("phases", self.phases), ("blocks", self.blocks), ("pool_size", self.pool_size), ("in_bands", self.in_bands)];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.feat_channels < self.in_bands {
            return Err(Error::Config(format!(
                "feat_channels ({}) must be at least in_bands ({})",
                self.feat_channels, self.in_bands
            )));
        }
        if let RhoInit::Value(v) = self.rho_init {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("rho_init must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn resolve_rho(&self, masks: &MaskStack) -> Result<f64> {
        match self.rho_init {
            RhoInit::Value(v) => Ok(v),
            RhoInit::Auto => fista::safe_step_size(masks),
        }
    }
}
