use std::path::Path;
use std::process::{Command, Output};

fn rdfnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdfnet")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_then_least_squares_fista() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = rdfnet(d, &["simulate", "--out", "sim", "--seed", "3", "--set", "nx=8", "--set", "ny=8", "--set", "n_lambda=4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["cube.scube", "mask.scube", "measurement.scube", "manifest.txt"] {
        assert!(d.join("sim").join(f).exists(), "{f}");
    }
    let o = rdfnet(
        d,
        &["solve-fista", "--out", "ls", "--set", "n_lambda=4", "--set", "mask=sim/mask.scube", "--set", "measurement=sim/measurement.scube", "--set", "lambda=0", "--set", "iters=500"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(d.join("ls/measurement_trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("iter,objective,residual"));
    assert_eq!(trace.lines().count(), 501);
    let residual: f64 = trace.lines().last().unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!(residual < 1e-6, "{residual}");
}

#[test]
fn evaluate_identical_cubes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(rdfnet(d, &["simulate", "--out", "sim", "--set", "nx=16", "--set", "ny=16", "--set", "n_lambda=2"]).status.code(), Some(0));
    let o = rdfnet(d, &["evaluate", "--out", "ev", "--set", "recon=sim/cube.scube", "--set", "reference=sim/cube.scube"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("PSNR=inf"), "{text}");
    assert!(text.contains("SSIM=1.000000"), "{text}");
    let csv = std::fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("cube,inf,inf,1.0"));
}

#[test]
fn gradcheck_passes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rdfnet(tmp.path(), &["gradcheck", "--out", "gc"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let worst: f64 = text.lines().last().unwrap().split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(worst <= 1e-4);
    let strict = rdfnet(tmp.path(), &["gradcheck", "--out", "gc2", "--set", "gradcheck_tol=1e-30"]);
    assert_eq!(strict.status.code(), Some(3));
}

#[test]
fn train_pipeline_and_manifest_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = "# tiny run\nnx = 12\nny = 12\nn_lambda = 4\nn_train = 2\nn_eval = 1\nepochs = 2\nbatch_size = 2\nphases = 2\nblocks = 2\nfeat_channels = 4\npool_size = 3\ninit = normalized\n";
    std::fs::write(d.join("tiny.cfg"), cfg).unwrap();
    let o = rdfnet(d, &["train", "--config", "tiny.cfg", "--out", "run1", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = rdfnet(d, &["train", "--config", "run1/manifest.txt", "--out", "run2"]);
    assert_eq!(o.status.code(), Some(0));
    let (a, b) = (files(&d.join("run1")), files(&d.join("run2")));
    assert_eq!(a.len(), b.len());
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        if na != "manifest.txt" {
            assert!(ba == bb, "{na} differs between runs");
        }
    }

    let common = ["--set", "mask=run1/mask.scube", "--set", "checkpoint=run1/model.rdfck", "--set", "measurement=run1/eval_data/eval000_measurement.scube"];
    let mut args = vec!["reconstruct", "--out", "rec", "--set", "reference=run1/eval_data/eval000_cube.scube"];
    args.extend(common);
    let o = rdfnet(d, &args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("rec/eval000_measurement_recon.scube").exists());
    assert!(d.join("rec/eval000_measurement_bands/band_003.pgm").exists());
    assert!(d.join("rec/metrics.csv").exists());

    let mut args = vec!["export-weights", "--out", "maps"];
    args.extend(common);
    let o = rdfnet(d, &args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("maps/eval000_measurement_maps/maps.csv")).unwrap();
    // 2 phases x 2 blocks x (weight + tau) x 12 x 12 values.
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2 * 144);
}

#[test]
fn ablate_writes_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rdfnet(
        tmp.path(),
        &["ablate", "--out", "ab", "--set", "nx=10", "--set", "ny=10", "--set", "n_lambda=3", "--set", "n_train=2", "--set", "n_eval=1", "--set", "epochs=1", "--set", "phases=1", "--set", "feat_channels=3", "--set", "seeds=0,1", "--set", "variants=baseline,full,N=3"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("ab/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,blocks,tau_mode,pool_size,runs,psnr_mean,psnr_sd,ssim_mean,ssim_sd");
    assert_eq!(lines.len(), 4);
    // `full` and `N=3` describe the same network, so they share results.
    let tail = |l: &str| l.split_once(',').unwrap().1.to_string();
    assert_eq!(tail(lines[2]), tail(lines[3]));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(rdfnet(d, &["bogus"]).status.code(), Some(1));
    assert_eq!(rdfnet(d, &["--help"]).status.code(), Some(0));
    assert_eq!(rdfnet(d, &["train", "--set", "no_such_key=1"]).status.code(), Some(1));
    assert_eq!(rdfnet(d, &["train", "--set", "epochs=many"]).status.code(), Some(1));
    assert_eq!(rdfnet(d, &["solve-fista", "--out", "x"]).status.code(), Some(1));
    assert_eq!(rdfnet(d, &["solve-fista", "--out", "x", "--set", "mask=missing.scube", "--set", "measurement=missing.scube"]).status.code(), Some(2));

    std::fs::write(d.join("junk.scube"), b"SCUBE1\nnx = 2\n").unwrap();
    assert_eq!(rdfnet(d, &["evaluate", "--out", "x", "--set", "recon=junk.scube", "--set", "reference=junk.scube"]).status.code(), Some(2));

    assert_eq!(rdfnet(d, &["simulate", "--out", "s"]).status.code(), Some(0));
    assert_eq!(rdfnet(d, &["train", "--config", "s/manifest.txt"]).status.code(), Some(1));
    assert_eq!(rdfnet(d, &["train", "--config", "nope.cfg"]).status.code(), Some(1));

    // Cube and mask disagree on extent: a data error.
    assert_eq!(rdfnet(d, &["simulate", "--out", "s2", "--set", "nx=5", "--set", "mask=s/mask.scube"]).status.code(), Some(2));
}
