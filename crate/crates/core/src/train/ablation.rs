use std::fmt;
use std::str::FromStr;

use super::{train, Dataset, TrainConfig, TrainRun};
use crate::error::{Error, Result};
use crate::model::{RdfNetConfig, TauMode};

/// A model configuration derived from a base for comparison runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// One block, fixed threshold.
    Baseline,
    /// One block, learned pixel-wise threshold.
    AdaptiveThreshold,
    /// Several blocks, fixed threshold.
    DynamicBlocks,
    /// Several blocks, learned threshold.
    Full,
    /// Full model with this many blocks.
    Blocks(usize),
    /// Full model with this pooling size.
    Pool(usize),
}

impl Variant {
    pub fn apply(&self, base: &RdfNetConfig) -> RdfNetConfig {
        let many = base.blocks.max(2);
        let mut cfg = base.clone();
        let (blocks, tau) = match *self {
            Variant::Baseline => (1, TauMode::Fixed),
            Variant::AdaptiveThreshold => (1, TauMode::Learned),
            Variant::DynamicBlocks => (many, TauMode::Fixed),
            Variant::Full => (many, TauMode::Learned),
            Variant::Blocks(n) => (n, TauMode::Learned),
            Variant::Pool(s) => {
                cfg.pool_size = s;
                (many, TauMode::Learned)
            }
        };
        cfg.blocks = blocks;
        cfg.tau_mode = tau;
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Baseline => f.write_str("baseline"),
            Variant::AdaptiveThreshold => f.write_str("+AT"),
            Variant::DynamicBlocks => f.write_str("+DB"),
            Variant::Full => f.write_str("full"),
            Variant::Blocks(n) => write!(f, "N={n}"),
            Variant::Pool(s) => write!(f, "s={s}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown variant {s:?} (baseline|+AT|+DB|full|N=<n>|s=<s>)"));
        match s {
            "baseline" => Ok(Variant::Baseline),
            "+AT" | "at" => Ok(Variant::AdaptiveThreshold),
            "+DB" | "db" => Ok(Variant::DynamicBlocks),
            "full" => Ok(Variant::Full),
            _ => {
                let (key, val) = s.split_once('=').ok_or_else(bad)?;
                let v: usize = val.parse().map_err(|_| bad())?;
                match key {
                    "N" | "n" if v > 0 => Ok(Variant::Blocks(v)),
                    "s" if v > 0 => Ok(Variant::Pool(v)),
                    _ => Err(bad()),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub config: RdfNetConfig,
    pub seeds: Vec<u64>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<Option<f64>>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

impl AblationRow {
    pub fn psnr_mean_sd(&self) -> (f64, f64) {
        mean_sd(&self.psnr)
    }

    pub fn ssim_mean_sd(&self) -> Option<(f64, f64)> {
        let v: Option<Vec<f64>> = self.ssim.iter().copied().collect();
        v.map(|v| mean_sd(&v))
    }
}

pub const ABLATION_HEADER: &str = "variant,blocks,tau_mode,pool_size,runs,psnr_mean,psnr_sd,ssim_mean,ssim_sd";

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let (pm, ps) = self.psnr_mean_sd();
        let (sm, ss) = match self.ssim_mean_sd() {
            Some((m, s)) => (format!("{m:.9}"), format!("{s:.9}")),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{pm:.9},{ps:.9},{sm},{ss}",
            self.variant,
            self.config.blocks,
            self.config.tau_mode,
            self.config.pool_size,
            self.psnr.len()
        )
    }
}

/// Trains every variant once per seed with otherwise identical settings.
/// Variants that resolve to the same model configuration share their runs.
pub fn ablate(dataset: &Dataset, base: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    ablate_with_progress(dataset, base, variants, seeds, |_, _, _| {})
}

pub fn ablate_with_progress(
    dataset: &Dataset,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(Variant, u64, &TrainRun),
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    if dataset.eval.is_empty() {
        return Err(Error::Config("ablation needs an evaluation set".into()));
    }
    let mut rows: Vec<AblationRow> = Vec::with_capacity(variants.len());
    for &variant in variants {
        let config = variant.apply(&base.model);
        if let Some(done) = rows.iter().find(|r| r.config == config) {
            rows.push(AblationRow { variant, ..done.clone() });
            continue;
        }
        let cfg = TrainConfig { model: config.clone(), out_dir: None, ..base.clone() };
        let mut row = AblationRow { variant, config, seeds: seeds.to_vec(), psnr: Vec::new(), ssim: Vec::new() };
        for &seed in seeds {
            let run = train(dataset, &cfg, seed)?;
            progress(variant, seed, &run);
            row.psnr.push(run.final_eval_psnr().ok_or_else(|| Error::Config("run produced no evaluation".into()))?);
            row.ssim.push(run.final_eval_ssim());
        }
        rows.push(row);
    }
    Ok(rows)
}
