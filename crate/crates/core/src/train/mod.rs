//! Losses, Adam, the epoch loop and the ablation harness.

mod ablation;
mod adam;
mod data;
mod loss;

pub use ablation::{ablate, ablate_with_progress, AblationRow, Variant, ABLATION_HEADER};
pub use adam::{AdamConfig, AdamState};
pub use data::{synthetic_cube, Dataset, DatasetSpec, Sample};
pub use loss::{compute_losses, loss_acc, loss_spa, loss_sym, loss_total, LossValues, LossWeights};

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::metrics::MetricReport;
use crate::model::{model_forward, RdfNetConfig, RdfNetParams};
use crate::optics::{CassiOperator, MaskStack, Measurement, SpectralCube};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: RdfNetConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub per_phase_supervision: bool,
    /// Evaluate every this many epochs (and always after the last); 0 means last only.
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (and always after the last); 0 means last only.
    pub checkpoint_every: usize,
    /// Checkpoints and the training log go here when set.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: RdfNetConfig::default(),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            epochs: 200,
            batch_size: 4,
            per_phase_supervision: false,
            eval_every: 1,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossValues,
    pub eval_psnr: Option<f64>,
    pub eval_ssim: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub params: RdfNetParams,
}

impl TrainRun {
    pub fn final_eval_psnr(&self) -> Option<f64> {
        self.history.iter().rev().find_map(|r| r.eval_psnr)
    }

    pub fn final_eval_ssim(&self) -> Option<f64> {
        self.history.iter().rev().find_map(|r| r.eval_ssim)
    }
}

pub const LOG_HEADER: &str = "epoch,L_acc,L_spa,L_sym,L_total,eval_psnr,eval_ssim";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
            self.epoch,
            l.acc,
            l.spa,
            l.sym,
            l.total,
            fmt_opt(self.eval_psnr),
            fmt_opt(self.eval_ssim)
        )
    }
}

/// One optimizer step on a mini-batch; returns the batch losses.
pub fn train_step(params: &mut RdfNetParams, adam: &mut AdamState, op: &Arc<CassiOperator>, batch: &[&Sample], cfg: &TrainConfig) -> Result<LossValues> {
    let frames = Measurement::stack(&batch.iter().map(|s| &s.measurement).collect::<Vec<_>>())?;
    let gt = SpectralCube::stack(&batch.iter().map(|s| &s.cube).collect::<Vec<_>>())?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let y = tape.constant(frames);
    let gt = tape.constant(gt);
    let out = model_forward(&mut tape, params, &bound, y, op, true)?;
    let (total, values) = compute_losses(&mut tape, params, &bound, &out, gt, &cfg.loss, cfg.per_phase_supervision)?;
    if !values.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    tape.backward(total)?;

    let store = params.store();
    let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(store.len());
    for id in store.ids() {
        if !store.is_trainable(id) {
            grads.push(None);
            continue;
        }
        match tape.grad(bound[id]) {
            Some(g) => {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
                }
                grads.push(Some(g.clone()));
            }
            None if !params.is_used(id) => grads.push(Some(Tensor::zeros(store.get(id).shape().to_vec()))),
            None => return Err(Error::Graph(format!("missing gradient for {}", store.name(id)))),
        }
    }
    drop(tape);
    let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
    adam.step(&mut params.store_mut().values_mut(), &grad_refs)?;
    Ok(values)
}

/// Inference in batches of at most `batch` frames.
pub fn reconstruct(params: &RdfNetParams, masks: &MaskStack, frames: &[&Measurement], batch: usize) -> Result<Vec<SpectralCube>> {
    let op = masks.operator();
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let bound = params.bind_constants(&mut tape);
        let y = tape.constant(Measurement::stack(chunk)?);
        let result = model_forward(&mut tape, params, &bound, y, &op, false)?;
        let value = tape.value(result.output);
        if !value.all_finite() {
            return Err(Error::NonFinite("reconstruction".into()));
        }
        for i in 0..chunk.len() {
            out.push(SpectralCube::from_tensor(value, i)?);
        }
    }
    Ok(out)
}

pub fn evaluate(params: &RdfNetParams, masks: &MaskStack, samples: &[Sample]) -> Result<MetricReport> {
    let frames: Vec<&Measurement> = samples.iter().map(|s| &s.measurement).collect();
    let recon = reconstruct(params, masks, &frames, 4)?;
    MetricReport::evaluate(samples.iter().zip(&recon).map(|(s, x)| (s.name.clone(), x, &s.cube)), 1.0)
}

fn due(every: usize, epoch: usize, last: usize) -> bool {
    epoch == last || (every > 0 && epoch % every == 0)
}

/// Trains from a fresh initialization drawn from `seed`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainRun> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho = cfg.model.resolve_rho(&dataset.masks)?;
    let params = RdfNetParams::init(&cfg.model, rho, &mut rng)?;
    train_from(dataset, cfg, seed, params, &mut rng)
}

/// Continues training `params` with the given shuffling stream.
pub fn train_from(dataset: &Dataset, cfg: &TrainConfig, seed: u64, mut params: RdfNetParams, rng: &mut ChaCha8Rng) -> Result<TrainRun> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let op = dataset.masks.operator();
    let mut adam = AdamState::new(cfg.adam, params.store().iter().map(|(_, t)| t));
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    let mut log = vec![LOG_HEADER.to_string()];

    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut sum = LossValues::default();
        let mut steps = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let v = train_step(&mut params, &mut adam, &op, &batch, cfg)?;
            sum.acc += v.acc;
            sum.spa += v.spa;
            sum.sym += v.sym;
            sum.total += v.total;
            steps += 1.0;
        }
        let losses = LossValues { acc: sum.acc / steps, spa: sum.spa / steps, sym: sum.sym / steps, total: sum.total / steps };
        let (eval_psnr, eval_ssim) = if !dataset.eval.is_empty() && due(cfg.eval_every, epoch, cfg.epochs) {
            let report = evaluate(&params, &dataset.masks, &dataset.eval)?;
            (Some(report.avg_psnr_db), report.avg_ssim)
        } else {
            (None, None)
        };
        let record = EpochRecord { epoch, losses, eval_psnr, eval_ssim };
        log.push(record.csv_line());
        history.push(record);

        if let Some(dir) = &cfg.out_dir {
            if due(cfg.checkpoint_every, epoch, cfg.epochs) {
                let path = dir.join(format!("checkpoint_epoch{epoch:05}.rdfck"));
                io::write_checkpoint(&path, &params)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = &cfg.out_dir {
        write_log(&dir.join("train_log.csv"), &log)?;
    }
    Ok(TrainRun { config: cfg.clone(), seed, history, checkpoints, params })
}

fn write_log(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    io::write_atomic(path, text.as_bytes())
}
