use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn mrsde(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrsde")).current_dir(dir).args(args).output().expect("spawn mrsde")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = mrsde(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

fn same_files(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        if name == "config.ini" {
            continue;
        }
        if name == "manifest.json" {
            let strip = |p: &Path| {
                let mut m = json(p);
                m["config"]["output"]["directory"] = Value::Null;
                m
            };
            assert_eq!(strip(&a.join(&name)), strip(&b.join(&name)));
            continue;
        }
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?} differs");
    }
}

#[test]
fn simulate_default_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    ok(dir.path(), &["simulate", "--out", "run"]);
    assert!(start.elapsed() < Duration::from_secs(60));
    let run = dir.path().join("run");
    let (header, mc) = csv(&run.join("ensemble.csv"));
    let (header2, closed) = csv(&run.join("marginal.csv"));
    assert_eq!(header, ["t", "mean_0", "variance"]);
    assert_eq!(header, header2);
    let manifest = json(&run.join("manifest.json"));
    let n = manifest["config"]["mc"]["paths"].as_f64().unwrap();
    for (a, b) in mc.iter().zip(&closed) {
        assert_eq!(a[0], b[0]);
        let se = (a[2] / n).sqrt();
        assert!((a[1] - b[1]).abs() <= 4.0 * se, "t {}: mean {} vs {}", a[0], a[1], b[1]);
        let vse = a[2] * (2.0 / (n - 1.0)).sqrt();
        assert!((a[2] - b[2]).abs() <= 4.0 * vse + 1e-15, "t {}: var {} vs {}", a[0], a[2], b[2]);
    }
}

#[test]
fn single_step_grid_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--mc.steps", "1", "--mc.paths", "100", "--out", "one"]);
    let (_, rows) = csv(&dir.path().join("one/ensemble.csv"));
    assert_eq!(rows.last().unwrap()[0], 1.0);
    assert!(rows.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str, out: &str, args: &[&str]| {
        let mut all = args.to_vec();
        all.extend(["--out", out]);
        let o = Command::new(env!("CARGO_BIN_EXE_mrsde"))
            .current_dir(dir.path())
            .env("RAYON_NUM_THREADS", threads)
            .args(&all)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let sim = ["simulate", "--mc.paths", "3000", "--schedule", "cosine"];
    run("1", "a", &sim);
    run("4", "b", &sim);
    run("1", "c", &sim);
    same_files(&dir.path().join("a"), &dir.path().join("b"));
    same_files(&dir.path().join("a"), &dir.path().join("c"));
    let cmp = ["compare", "--mc.paths", "300", "--compare.seeds", "2", "--sample.steps", "100"];
    run("1", "d", &cmp);
    run("3", "e", &cmp);
    same_files(&dir.path().join("d"), &dir.path().join("e"));
}

#[test]
fn manifest_reruns_the_experiment() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["cocycle", "--schedule", "cosine", "--mc.paths", "10", "--out", "first"]);
    let manifest = json(&dir.path().join("first/manifest.json"));
    assert_eq!(manifest["command"], "cocycle");
    assert_eq!(manifest["config"]["schedule"]["kind"], "cosine");
    assert!(manifest["version"].is_string());
    ok(dir.path(), &["cocycle", "--config", "first/config.ini", "--out", "second"]);
    same_files(&dir.path().join("first"), &dir.path().join("second"));
}

#[test]
fn cocycle_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["cocycle", "--schedule", "constant", "--out", "c"]);
    ok(dir.path(), &["cocycle", "--schedule", "cosine", "--out", "k"]);
    let holds = json(&dir.path().join("c/cocycle.json"));
    let violated = json(&dir.path().join("k/cocycle.json"));
    assert_eq!(holds["verdict"], "holds");
    assert_eq!(violated["verdict"], "violated");
    let manifest = json(&dir.path().join("c/manifest.json"));
    let listed: Vec<(f64, f64)> = manifest["config"]["cocycle"]["pairs"]
        .as_str()
        .unwrap()
        .split(',')
        .map(|p| {
            let (s, t) = p.trim().split_once(':').unwrap();
            (s.parse().unwrap(), t.parse().unwrap())
        })
        .collect();
    let reported: Vec<(f64, f64)> = holds["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| (p["s"].as_f64().unwrap(), p["t"].as_f64().unwrap()))
        .collect();
    assert_eq!(listed, reported);
}

#[test]
fn tdd_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["tdd", "--out", "t"]);
    let report = json(&dir.path().join("t/tdd.json"));
    assert_eq!(report["delta"], 0.05);
    assert!(report["exceed_fraction"].as_f64().unwrap() >= 0.93);
    let (header, rows) = csv(&dir.path().join("t/tdd_sweep.csv"));
    assert_eq!(header[2], "term_residual");
    for w in rows.windows(2) {
        assert!(w[0][0] < w[1][0] && w[1][2] < w[0][2]);
    }
    let (header, kl) = csv(&dir.path().join("t/kl_sweep.csv"));
    assert_eq!(header, ["tau", "kl_closed", "kl_empirical", "kl_se"]);
    assert_eq!(kl.iter().map(|r| r[0]).collect::<Vec<_>>(), [1.0, 2.0, 4.0]);
    for w in kl.windows(2) {
        assert!(w[1][1] < w[0][1]);
    }
    for r in &kl {
        assert!((r[1] - r[2]).abs() <= 4.0 * r[3], "tau {}: {} vs {}", r[0], r[1], r[2]);
    }
}

#[test]
fn compare_outputs() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["compare", "--out", "c"]);
    let (header, rows) = csv_rows(&dir.path().join("c/compare_rows.csv"));
    assert_eq!(header, "variant,seed,terminal_mse,terminal_w2,steps");
    assert_eq!(rows.len(), 30);
    let summary = json(&dir.path().join("c/compare.json"));
    assert!(summary["ordering_holds_on_seeds"].as_u64().unwrap() >= 8);
    let var = |v: &str| summary[v]["mean_terminal_var"].as_f64().unwrap();
    assert!(var("coef-decoupled") >= 2.0 * var("d3gm"));
    assert!(fs::read_to_string(dir.path().join("c/compare_curves.csv")).unwrap().starts_with("variant,t,mean_dist,var\n"));
}

fn csv_rows(path: &Path) -> (String, Vec<String>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().map(String::from);
    (lines.next().unwrap(), lines.collect())
}

#[test]
fn train_restore_defaults() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train-restore", "--out", "r"]);
    let run = dir.path().join("r");
    let manifest = json(&run.join("manifest.json"));
    assert_eq!(manifest["config"]["process"]["lambda"], 10.0);
    assert_eq!(manifest["config"]["process"]["tau"], 2.0);
    assert_eq!(manifest["config"]["mc"]["seed"], 42.0);
    let metrics = json(&run.join("metrics.json"));
    let signals = metrics["signals"].as_array().unwrap();
    assert_eq!(signals.len(), 10);
    let wins = signals.iter().filter(|s| s["mse_d3gm"].as_f64() < s["mse_input"].as_f64()).count();
    assert!(wins >= 8, "{wins}/10");
    assert_eq!(metrics["d3gm_beats_input"].as_u64(), Some(wins as u64));
    for s in signals {
        for key in ["psnr_input", "psnr_d3gm", "psnr_ou"] {
            assert!(s[key].as_f64().unwrap().is_finite());
        }
    }
    let (header, rows) = csv_rows(&run.join("restored.csv"));
    assert_eq!(header, "signal,index,clean,degraded,d3gm,ou");
    assert_eq!(rows.len(), 160);
    assert!(run.join("score_d3gm.json").exists() && run.join("score_d3gm.bin").exists());
}

// The degraded input equals the clean signal here, so its mse is exactly
// zero, while a reverse run stopped at t_min keeps a small positive error.
#[test]
#[ignore = "input mse is exactly zero; sampled restorations keep a positive floor"]
fn identity_operator_without_noise() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train-restore", "--problem.operator", "identity", "--problem.noise", "0", "--out", "i"]);
    let metrics = json(&dir.path().join("i/metrics.json"));
    for s in metrics["signals"].as_array().unwrap() {
        assert!(s["mse_d3gm"].as_f64().unwrap() <= s["mse_input"].as_f64().unwrap());
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| mrsde(dir.path(), args).status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&[]), Some(1));
    assert_eq!(code(&["bogus"]), Some(1));
    assert_eq!(code(&["simulate", "--mc.pathz", "3"]), Some(1));
    assert_eq!(code(&["simulate", "--process.lambda", "-1"]), Some(1));
    assert_eq!(code(&["simulate", "--schedule", "sawtooth"]), Some(1));
    assert_eq!(code(&["simulate", "--config", "missing.ini"]), Some(1));
    assert_eq!(code(&["cocycle", "--cocycle.pairs", "0.5:0.2"]), Some(1));
    fs::write(dir.path().join("file"), "").unwrap();
    assert_eq!(code(&["simulate", "--mc.paths", "10", "--out", "file/sub"]), Some(1));
    assert_eq!(code(&["simulate", "--mc.paths", "100", "--process.sigma", "1e200", "--out", "s"]), Some(2));
    assert_eq!(
        code(&["train-restore", "--train.steps", "3", "--train.lr", "1e300", "--problem.test_signals", "1", "--out", "t"]),
        Some(2)
    );
}

#[test]
fn formats_select_outputs() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--mc.paths", "100", "--output.formats", "json", "--out", "j"]);
    let run = dir.path().join("j");
    assert!(run.join("summary.json").exists());
    assert!(!run.join("ensemble.csv").exists());
    assert!(run.join("manifest.json").exists());
}
