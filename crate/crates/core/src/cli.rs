//! The `rdfnet` command-line surface.
//!
//! Every command resolves a [`RunConfig`] (defaults, then `--config`, then
//! `--set key=value` overrides, then `--seed` / `--out`), writes it to
//! `<out>/manifest.txt`, and places all outputs in `<out>`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (malformed or mismatched files, I/O), 3 numerical failure (non-finite
//! values, gradient check over tolerance).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checks;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fista;
use crate::io;
use crate::metrics::MetricReport;
use crate::model::{export_region_weights, model_forward, RdfNetParams};
use crate::optics::{simulate, DispersionSpec, Mask, MaskStack, Measurement, SpectralCube};
use crate::tensor::Tape;
use crate::train::{self, synthetic_cube, Dataset, ABLATION_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Parser, Debug)]
#[command(name = "rdfnet", version, about = "CASSI simulation, FISTA and RDFNet reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (`key = value` lines); a previous manifest works too.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random draw of this run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cube + mask to a measurement (synthesizes whichever is not given).
    Simulate(Common),
    /// Classical FISTA reconstruction with an objective trace.
    SolveFista(Common),
    /// Train RDFNet on a synthetic or supplied dataset.
    Train(Common),
    /// Checkpoint + measurements to cubes, band images and spectra.
    Reconstruct(Common),
    /// PSNR/SSIM of reconstructions against references.
    Evaluate(Common),
    /// Train each variant over several seeds and tabulate eval PSNR/SSIM.
    Ablate(Common),
    /// Finite-difference check of every differentiable op and the full loss.
    Gradcheck(Common),
    /// Region weight and threshold maps of a trained model.
    ExportWeights(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Simulate(c) => ("simulate", c),
            Command::SolveFista(c) => ("solve-fista", c),
            Command::Train(c) => ("train", c),
            Command::Reconstruct(c) => ("reconstruct", c),
            Command::Evaluate(c) => ("evaluate", c),
            Command::Ablate(c) => ("ablate", c),
            Command::Gradcheck(c) => ("gradcheck", c),
            Command::ExportWeights(c) => ("export-weights", c),
        }
    }
}

/// A failed run: the message and the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: exit_code(&e), message: e.to_string() }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Format(_) | Error::Io { .. } | Error::Dimension(_) | Error::Domain(_) => EXIT_DATA,
        Error::NonFinite(_) | Error::Graph(_) | Error::MissingIntermediates(_) => EXIT_NUMERICAL,
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (name, common) = cli.command.parts();
    match resolve(name, common).map_err(Failure::from).and_then(|cfg| run(&cfg)) {
        Ok(summary) => {
            print!("{summary}");
            EXIT_OK
        }
        Err(f) => {
            eprintln!("rdfnet {name}: {}", f.message);
            f.code
        }
    }
}

fn resolve(name: &str, common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Error::Config(format!("cannot read config: {e}")),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if !cfg.command.is_empty() && cfg.command != name {
        return Err(Error::Config(format!("config was written for `{}`, not `{name}`", cfg.command)));
    }
    for s in &common.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.command = name.to_string();
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a resolved configuration; returns the text printed on success.
pub fn run(cfg: &RunConfig) -> std::result::Result<String, Failure> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    io::write_atomic(&cfg.out.join(MANIFEST), cfg.to_text().as_bytes())?;
    let summary = match cfg.command.as_str() {
        "simulate" => cmd_simulate(cfg)?,
        "solve-fista" => cmd_solve_fista(cfg)?,
        "train" => cmd_train(cfg)?,
        "reconstruct" => cmd_reconstruct(cfg)?,
        "evaluate" => cmd_evaluate(cfg)?,
        "ablate" => cmd_ablate(cfg)?,
        "gradcheck" => return cmd_gradcheck(cfg),
        "export-weights" => cmd_export_weights(cfg)?,
        other => return Err(Error::Config(format!("unknown command {other:?}")).into()),
    };
    Ok(summary)
}

fn dispersion(cfg: &RunConfig) -> DispersionSpec {
    DispersionSpec { step_px: cfg.data.step_px, ref_band: cfg.data.ref_band }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("`{key}` must be set for this command")))
}

fn nonempty<'a>(p: &'a [PathBuf], key: &str) -> Result<&'a [PathBuf]> {
    if p.is_empty() {
        return Err(Error::Config(format!("`{key}` must list at least one file")));
    }
    Ok(p)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "item".into())
}

/// Output stems, disambiguated by position when inputs share a file name.
fn stems(paths: &[PathBuf]) -> Vec<String> {
    let raw: Vec<String> = paths.iter().map(|p| stem(p)).collect();
    raw.iter()
        .enumerate()
        .map(|(i, s)| if raw.iter().filter(|t| *t == s).count() > 1 { format!("{s}_{i}") } else { s.clone() })
        .collect()
}

fn load_masks(cfg: &RunConfig, n_lambda: usize) -> Result<MaskStack> {
    let mask = io::read_mask(required(&cfg.mask, "mask")?)?;
    MaskStack::new(mask, dispersion(cfg), n_lambda)
}

fn load_measurements(cfg: &RunConfig, masks: &MaskStack) -> Result<Vec<Measurement>> {
    nonempty(&cfg.measurement, "measurement")?
        .iter()
        .map(|p| {
            let m = io::read_measurement(p)?;
            masks.check_measurement(&m)?;
            Ok(m)
        })
        .collect()
}

fn metrics_csv(report: &MetricReport) -> String {
    let mut s = String::from("name,psnr_db,psnr_band_avg_db,ssim\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for m in &report.scenes {
        s.push_str(&format!("{},{:?},{:?},{}\n", m.name, m.psnr_db, m.psnr_band_avg_db, opt(m.ssim)));
    }
    let band_avg = report.scenes.iter().map(|m| m.psnr_band_avg_db).sum::<f64>() / report.scenes.len().max(1) as f64;
    s.push_str(&format!("mean,{:?},{band_avg:?},{}\n", report.avg_psnr_db, opt(report.avg_ssim)));
    s
}

fn report_line(report: &MetricReport) -> String {
    let psnr = if report.avg_psnr_db.is_infinite() { "PSNR=inf".to_string() } else { format!("PSNR={:.6} dB", report.avg_psnr_db) };
    match report.avg_ssim {
        Some(s) => format!("{psnr} SSIM={s:.6}"),
        None => psnr,
    }
}

fn load_references(cfg: &RunConfig, n: usize) -> Result<Option<Vec<SpectralCube>>> {
    if cfg.reference.is_empty() {
        return Ok(None);
    }
    if cfg.reference.len() != n {
        return Err(Error::Config(format!("{} reference cubes for {n} reconstructions", cfg.reference.len())));
    }
    cfg.reference.iter().map(|p| io::read_cube(p)).collect::<Result<Vec<_>>>().map(Some)
}

fn cmd_simulate(cfg: &RunConfig) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = &cfg.data;
    let cube = match &cfg.cube {
        Some(p) => io::read_cube(p)?,
        None => synthetic_cube(d.nx, d.ny, d.n_lambda, &mut rng)?,
    };
    let mask = match &cfg.mask {
        Some(p) => io::read_mask(p)?,
        None => Mask::random_binary(cube.nx(), cube.ny(), d.mask_p_open, &mut rng)?,
    };
    let masks = MaskStack::new(mask, dispersion(cfg), cube.n_lambda())?;
    let meas = simulate(&cube, &masks, d.noise_sigma, &mut rng)?;
    io::write_cube(&cfg.out.join("cube.scube"), &cube)?;
    io::write_mask(&cfg.out.join("mask.scube"), masks.base())?;
    io::write_measurement(&cfg.out.join("measurement.scube"), &meas)?;
    Ok(format!("measurement {}x{} from a {}x{}x{} cube\n", meas.nx(), meas.ny_ext(), cube.nx(), cube.ny(), cube.n_lambda()))
}

fn cmd_solve_fista(cfg: &RunConfig) -> Result<String> {
    let masks = load_masks(cfg, cfg.data.n_lambda)?;
    let frames = load_measurements(cfg, &masks)?;
    let solver = cfg.solver(&masks)?;
    let names = stems(&cfg.measurement);
    let mut recons = Vec::with_capacity(frames.len());
    let mut out = String::new();
    for (name, y) in names.iter().zip(&frames) {
        let sol = fista::solve(y, &masks, &solver)?;
        let mut trace = String::from("iter,objective,residual\n");
        for r in &sol.trace {
            trace.push_str(&format!("{},{:?},{:?}\n", r.iter, r.objective, r.residual));
        }
        io::write_atomic(&cfg.out.join(format!("{name}_trace.csv")), trace.as_bytes())?;
        io::write_cube(&cfg.out.join(format!("{name}_recon.scube")), &sol.cube)?;
        let last = sol.trace.last().expect("at least one iteration");
        out.push_str(&format!("{name}: {} iterations, objective {:e}, residual {:e}\n", last.iter, last.objective, last.residual));
        recons.push(sol.cube);
    }
    if let Some(refs) = load_references(cfg, recons.len())? {
        let report = MetricReport::evaluate(names.iter().cloned().zip(&recons).zip(&refs).map(|((n, x), g)| (n, x, g)), 1.0)?;
        io::write_atomic(&cfg.out.join("metrics.csv"), metrics_csv(&report).as_bytes())?;
        out.push_str(&format!("{}\n", report_line(&report)));
    }
    Ok(out)
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.train_cubes.is_empty() {
        return Dataset::synthesize(&cfg.data);
    }
    let load = |paths: &[PathBuf]| -> Result<Vec<(String, SpectralCube)>> {
        stems(paths).into_iter().zip(paths).map(|(n, p)| Ok((n, io::read_cube(p)?))).collect()
    };
    let train = load(&cfg.train_cubes)?;
    let eval = load(&cfg.eval_cubes)?;
    let masks = load_masks(cfg, train[0].1.n_lambda())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
    Dataset::from_cubes(masks, train, eval, cfg.data.noise_sigma, &mut rng)
}

fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let ds = dataset(cfg)?;
    let mut tc = cfg.train();
    tc.model.in_bands = ds.masks.n_lambda();
    tc.out_dir = Some(cfg.out.clone());
    let run = train::train(&ds, &tc, cfg.seed)?;
    io::write_checkpoint(&cfg.out.join("model.rdfck"), &run.params)?;
    io::write_mask(&cfg.out.join("mask.scube"), ds.masks.base())?;
    let data_dir = cfg.out.join("eval_data");
    if !ds.eval.is_empty() {
        std::fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    }
    for s in &ds.eval {
        io::write_cube(&data_dir.join(format!("{}_cube.scube", s.name)), &s.cube)?;
        io::write_measurement(&data_dir.join(format!("{}_measurement.scube", s.name)), &s.measurement)?;
    }
    let last = run.history.last().map(|r| r.losses.total).unwrap_or(f64::NAN);
    let mut out = format!("{} epochs, {} parameters, final L_total {last:e}\n", tc.epochs, run.params.parameter_count());
    if let Some(p) = run.final_eval_psnr() {
        out.push_str(&format!("eval PSNR {p:.6} dB"));
        if let Some(s) = run.final_eval_ssim() {
            out.push_str(&format!(" SSIM {s:.6}"));
        }
        out.push('\n');
    }
    Ok(out)
}

fn load_model(cfg: &RunConfig) -> Result<(RdfNetParams, MaskStack, Vec<Measurement>)> {
    let params = io::read_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
    let masks = load_masks(cfg, params.config().in_bands)?;
    let frames = load_measurements(cfg, &masks)?;
    Ok((params, masks, frames))
}

fn cmd_reconstruct(cfg: &RunConfig) -> Result<String> {
    let (params, masks, frames) = load_model(cfg)?;
    let recons = train::reconstruct(&params, &masks, &frames.iter().collect::<Vec<_>>(), cfg.batch_size)?;
    let names = stems(&cfg.measurement);
    for (name, x) in names.iter().zip(&recons) {
        io::write_cube(&cfg.out.join(format!("{name}_recon.scube")), x)?;
        io::export_band_images(x, &cfg.out.join(format!("{name}_bands")), (cfg.pixel_x, cfg.pixel_y))?;
    }
    let mut out = format!("reconstructed {} frame(s)\n", recons.len());
    if let Some(refs) = load_references(cfg, recons.len())? {
        let report = MetricReport::evaluate(names.iter().cloned().zip(&recons).zip(&refs).map(|((n, x), g)| (n, x, g)), 1.0)?;
        io::write_atomic(&cfg.out.join("metrics.csv"), metrics_csv(&report).as_bytes())?;
        out.push_str(&format!("{}\n", report_line(&report)));
    }
    Ok(out)
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<String> {
    let recon_paths = nonempty(&cfg.recon, "recon")?;
    let recons = recon_paths.iter().map(|p| io::read_cube(p)).collect::<Result<Vec<_>>>()?;
    let refs = load_references(cfg, recons.len())?.ok_or_else(|| Error::Config("`reference` must list one cube per reconstruction".into()))?;
    let names = stems(recon_paths);
    let report = MetricReport::evaluate(names.into_iter().zip(&recons).zip(&refs).map(|((n, x), g)| (n, x, g)), 1.0)?;
    io::write_atomic(&cfg.out.join("metrics.csv"), metrics_csv(&report).as_bytes())?;
    Ok(format!("{}\n", report_line(&report)))
}

fn cmd_ablate(cfg: &RunConfig) -> Result<String> {
    let ds = dataset(cfg)?;
    let mut base = cfg.train();
    base.model.in_bands = ds.masks.n_lambda();
    let rows = train::ablate_with_progress(&ds, &base, &cfg.variants, &cfg.seeds, |v, seed, run| {
        eprintln!("{v} seed {seed}: eval PSNR {:?}", run.final_eval_psnr());
    })?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut out = String::new();
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
        let (m, s) = r.psnr_mean_sd();
        out.push_str(&format!("{:>10}  PSNR {m:.4} +- {s:.4} dB\n", r.variant.to_string()));
    }
    io::write_atomic(&cfg.out.join("ablation.csv"), csv.as_bytes())?;
    Ok(out)
}

fn cmd_gradcheck(cfg: &RunConfig) -> std::result::Result<String, Failure> {
    let entries = checks::gradient_suite(cfg.seed, cfg.gradcheck_h)?;
    let mut csv = String::from("check,coordinates,max_rel_error\n");
    let mut out = String::new();
    let mut worst = 0.0f64;
    for e in &entries {
        csv.push_str(&format!("{},{},{:?}\n", e.name, e.coordinates, e.max_rel_error));
        out.push_str(&format!("{:<24} {:>6} coords  max rel error {:.3e}\n", e.name, e.coordinates, e.max_rel_error));
        worst = worst.max(e.max_rel_error);
    }
    io::write_atomic(&cfg.out.join("gradcheck.csv"), csv.as_bytes())?;
    out.push_str(&format!("max rel error {worst:.3e} (tolerance {:e})\n", cfg.gradcheck_tol));
    if !(worst <= cfg.gradcheck_tol) {
        return Err(Failure { code: EXIT_NUMERICAL, message: format!("{out}gradient check failed") });
    }
    Ok(out)
}

fn cmd_export_weights(cfg: &RunConfig) -> Result<String> {
    let (params, masks, frames) = load_model(cfg)?;
    let op = masks.operator();
    let mut tape = Tape::new();
    let bound = params.bind_constants(&mut tape);
    let y = tape.constant(Measurement::stack(&frames.iter().collect::<Vec<_>>())?);
    let result = model_forward(&mut tape, &params, &bound, y, &op, true)?;
    let names = stems(&cfg.measurement);
    for (i, name) in names.iter().enumerate() {
        let maps = export_region_weights(&tape, &result, i)?;
        io::write_region_weights(&cfg.out.join(format!("{name}_maps")), &maps)?;
    }
    Ok(format!("exported maps for {} frame(s), {} phases x {} blocks\n", names.len(), params.config().phases, params.config().blocks))
}
