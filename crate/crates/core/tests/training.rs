mod common;

use common::rng;
use rdfnet_core::io::{decode_checkpoint, encode_checkpoint};
use rdfnet_core::model::{model_forward, RdfNetConfig, RdfNetParams};
use rdfnet_core::optics::{InitMode, Measurement, SpectralCube};
use rdfnet_core::tensor::Tape;
use rdfnet_core::train::{
    compute_losses, evaluate, reconstruct, train, train_step, AdamConfig, AdamState, Dataset, DatasetSpec, LossWeights, Sample, TrainConfig,
};

fn tiny_dataset(seed: u64) -> Dataset {
    Dataset::synthesize(&DatasetSpec { nx: 12, ny: 12, n_lambda: 4, n_train: 4, n_eval: 2, seed, ..DatasetSpec::default() }).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: RdfNetConfig { phases: 2, blocks: 2, pool_size: 3, in_bands: 4, feat_channels: 4, init: InitMode::Normalized, ..RdfNetConfig::default() },
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

fn batch_loss(params: &RdfNetParams, ds: &Dataset, batch: &[&Sample], cfg: &TrainConfig) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind_constants(&mut tape);
    let y = tape.constant(Measurement::stack(&batch.iter().map(|s| &s.measurement).collect::<Vec<_>>()).unwrap());
    let gt = tape.constant(SpectralCube::stack(&batch.iter().map(|s| &s.cube).collect::<Vec<_>>()).unwrap());
    let out = model_forward(&mut tape, params, &bound, y, &ds.masks.operator(), true).unwrap();
    compute_losses(&mut tape, params, &bound, &out, gt, &cfg.loss, false).unwrap().1.total
}

#[test]
fn loss_terms_match_direct_sums() {
    let ds = tiny_dataset(1);
    let cfg = tiny_config();
    let params = RdfNetParams::init(&cfg.model, cfg.model.resolve_rho(&ds.masks).unwrap(), &mut rng(1)).unwrap();
    let batch: Vec<&Sample> = ds.train.iter().take(2).collect();
    let mut tape = Tape::new();
    let bound = params.bind_constants(&mut tape);
    let y = tape.constant(Measurement::stack(&batch.iter().map(|s| &s.measurement).collect::<Vec<_>>()).unwrap());
    let gt_t = SpectralCube::stack(&batch.iter().map(|s| &s.cube).collect::<Vec<_>>()).unwrap();
    let gt = tape.constant(gt_t.clone());
    let out = model_forward(&mut tape, &params, &bound, y, &ds.masks.operator(), true).unwrap();
    let w = LossWeights { alpha: 0.7, beta: 0.3, gamma: 0.2 };
    let (_, v) = compute_losses(&mut tape, &params, &bound, &out, gt, &w, false).unwrap();

    let x = tape.value(out.output).data();
    let acc: f64 = x.iter().zip(gt_t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 2.0;
    assert!((v.acc - acc).abs() <= 1e-9 * acc.max(1.0));

    let phases = &out.intermediates().unwrap().phases;
    let mut spa = 0.0;
    for trace in phases {
        let wv = tape.value(trace.weights);
        let (b, n, h, wd) = wv.dims4().unwrap();
        let c = tape.value(trace.transforms[0]).shape()[1];
        for bi in 0..b {
            for ch in 0..c {
                for p in 0..h * wd {
                    let s: f64 = (0..n).map(|i| wv.data()[(bi * n + i) * h * wd + p] * tape.value(trace.transforms[i]).data()[(bi * c + ch) * h * wd + p]).sum();
                    spa += s.abs();
                }
            }
        }
    }
    spa /= (phases.len() * 2) as f64;
    assert!((v.spa - spa).abs() <= 1e-9 * spa.max(1.0));
    assert!(v.sym >= 0.0);
    assert!((v.total - (0.7 * v.acc + 0.3 * v.spa + 0.2 * v.sym)).abs() <= 1e-12 * v.total.max(1.0));
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let ds = tiny_dataset(2);
    let cfg = TrainConfig { adam: AdamConfig { lr: 0.0, ..AdamConfig::default() }, ..tiny_config() };
    let init = RdfNetParams::init(&cfg.model, cfg.model.resolve_rho(&ds.masks).unwrap(), &mut rng(5)).unwrap();
    let run = train(&ds, &cfg, 5).unwrap();
    assert_eq!(run.params, init);
    assert_eq!(run.history.len(), 2);
}

#[test]
fn training_is_deterministic() {
    let ds = tiny_dataset(3);
    let cfg = TrainConfig { adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() }, ..tiny_config() };
    let a = train(&ds, &cfg, 7).unwrap();
    let b = train(&ds, &cfg, 7).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(encode_checkpoint(&a.params), encode_checkpoint(&b.params));
    let c = train(&ds, &cfg, 8).unwrap();
    assert_ne!(encode_checkpoint(&a.params), encode_checkpoint(&c.params));
}

#[test]
fn checkpointed_model_evaluates_bit_exactly() {
    let ds = tiny_dataset(4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { out_dir: Some(dir.path().to_path_buf()), checkpoint_every: 1, ..tiny_config() };
    let run = train(&ds, &cfg, 2).unwrap();
    assert_eq!(run.checkpoints.len(), 2);
    let restored = rdfnet_core::io::read_checkpoint(run.checkpoints.last().unwrap()).unwrap();
    assert_eq!(restored, run.params);
    let a = evaluate(&run.params, &ds.masks, &ds.eval).unwrap();
    let b = evaluate(&restored, &ds.masks, &ds.eval).unwrap();
    assert_eq!(a.avg_psnr_db.to_bits(), b.avg_psnr_db.to_bits());
    assert_eq!(Some(a.avg_psnr_db), run.final_eval_psnr());

    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,L_acc,L_spa,L_sym,L_total,eval_psnr,eval_ssim");
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2].split(',').count(), 7);
}

#[test]
fn one_small_step_decreases_the_batch_loss() {
    for seed in 0..10 {
        let ds = tiny_dataset(10 + seed);
        let cfg = TrainConfig { adam: AdamConfig { lr: 1e-5, ..AdamConfig::default() }, ..tiny_config() };
        let mut params = RdfNetParams::init(&cfg.model, cfg.model.resolve_rho(&ds.masks).unwrap(), &mut rng(seed)).unwrap();
        let batch: Vec<&Sample> = ds.train.iter().take(2).collect();
        let before = batch_loss(&params, &ds, &batch, &cfg);
        let mut adam = AdamState::new(cfg.adam, params.store().iter().map(|(_, t)| t));
        let reported = train_step(&mut params, &mut adam, &ds.masks.operator(), &batch, &cfg).unwrap();
        assert_eq!(reported.total.to_bits(), before.to_bits());
        let after = batch_loss(&params, &ds, &batch, &cfg);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn reconstruct_batches_agree_with_single_frames() {
    let ds = tiny_dataset(6);
    let cfg = tiny_config();
    let params = RdfNetParams::init(&cfg.model, 0.2, &mut rng(6)).unwrap();
    let frames: Vec<&Measurement> = ds.train.iter().map(|s| &s.measurement).collect();
    let all = reconstruct(&params, &ds.masks, &frames, 4).unwrap();
    let ones = reconstruct(&params, &ds.masks, &frames, 1).unwrap();
    for (a, b) in all.iter().zip(&ones) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn fixed_tau_model_trains() {
    let ds = tiny_dataset(7);
    let mut cfg = TrainConfig { adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() }, ..tiny_config() };
    cfg.model.tau_mode = rdfnet_core::model::TauMode::Fixed;
    let run = train(&ds, &cfg, 1).unwrap();
    let id = run.params.store().find("phase0.block0.tau_logit").unwrap();
    assert_ne!(run.params.store().get(id).item().unwrap(), 0.0);
    let tid = run.params.store().find("phase0.block0.thresh1.weight").unwrap();
    let init = RdfNetParams::init(&cfg.model, cfg.model.resolve_rho(&ds.masks).unwrap(), &mut rng(1)).unwrap();
    assert_eq!(run.params.store().get(tid), init.store().get(tid));
}

#[test]
fn checkpoint_bytes_round_trip() {
    let cfg = tiny_config();
    let params = RdfNetParams::init(&cfg.model, 0.2, &mut rng(3)).unwrap();
    let bytes = encode_checkpoint(&params);
    assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()), bytes);
}
