use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

const N: usize = 6;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hamlearn"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write(dir: &Path, name: &str, v: &Value) {
    fs::write(dir.join(name), serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn read(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

/// Last JSON object printed to stderr.
fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str(line).unwrap()
}

/// Cosine-basis modes: orthonormal by construction.
fn modes() -> Value {
    let vectors: Vec<Vec<f64>> = (0..N)
        .map(|k| {
            let norm = if k == 0 { (1.0 / N as f64).sqrt() } else { (2.0 / N as f64).sqrt() };
            (0..N).map(|i| norm * (PI * k as f64 * (i as f64 + 0.5) / N as f64).cos()).collect()
        })
        .collect();
    let frequencies: Vec<f64> = (0..N).map(|k| 20.0 - 0.3 * k as f64).collect();
    json!({ "frequencies": frequencies, "vectors": vectors })
}

/// Modes, tones and calibrated amplitudes, plus the theory couplings.
fn theory(dir: &Path) {
    write(dir, "modes.json", &modes());
    write(
        dir,
        "tones.json",
        &json!([
            { "detuning": 20.4, "eta_ref": 0.1, "omega_ref": 20.0 },
            { "detuning": 18.0, "eta_ref": 0.1, "omega_ref": 20.0 }
        ]),
    );
    write(dir, "amplitudes.json", &json!([vec![30.0; N], vec![20.0; N]]));
    ok(
        dir,
        &[
            "couplings", "--modes", "modes.json", "--tones", "tones.json", "--amplitudes", "amplitudes.json",
            "--out", "truth.json",
        ],
    );
}

fn zero_model(dir: &Path) {
    let pairs = N * (N - 1) / 2;
    write(
        dir,
        "zero.json",
        &json!({ "n": N, "j_upper": vec![0.0; pairs], "h": vec![0.0; N], "units": "rad_per_ms" }),
    );
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    theory(d);
    let gen = |seed: &str, out: &str| {
        ok(d, &["--seed", seed, "generate", "--model", "truth.json", "--shots", "200", "--spam", "0.01", "--out", out]);
        fs::read(d.join(out)).unwrap()
    };
    let a = gen("5", "a.jsonl");
    let b = gen("5", "b.jsonl");
    let c = gen("6", "c.jsonl");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn generate_requires_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    theory(d);
    let out = run(d, &["generate", "--model", "truth.json", "--shots", "10", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "validation");
}

#[test]
fn missing_model_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--seed", "1", "generate", "--model", "nope.json", "--shots", "10", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(4));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("nope.json"));
}

#[test]
fn malformed_model_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "bad.json", &json!({ "n": 3, "j_upper": [0.1, 0.2], "h": [0.0, 0.0, 0.0], "units": "rad_per_ms" }));
    let out = run(d, &["--seed", "1", "generate", "--model", "bad.json", "--shots", "10", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "validation");
    assert!(!d.join("x.jsonl").exists());
}

#[test]
fn missing_decoherence_points_to_its_fit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    theory(d);
    ok(d, &["--seed", "2", "generate", "--model", "truth.json", "--shots", "100", "--out", "data.jsonl"]);
    ok(d, &["estimate", "--data", "data.jsonl", "--out", "obs.json"]);
    let out = run(d, &["fit", "--scheme", "on2", "--train", "obs.json", "--init", "truth.json", "--out", "fit.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "validation");
    assert!(err["hint"].as_str().unwrap().contains("--scheme decoherence"));
}

#[test]
fn config_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    theory(d);
    write(d, "cfg.json", &json!({ "model": "truth.json", "shots": 40, "times": [0.0, 1.0, 2.0] }));
    ok(d, &["--seed", "3", "--config", "cfg.json", "generate", "--out", "a.jsonl"]);
    ok(d, &["--seed", "3", "--config", "cfg.json", "generate", "--shots", "20", "--out", "b.jsonl"]);
    let lines = |f: &str| fs::read_to_string(d.join(f)).unwrap().lines().filter(|l| l.contains("\"bits\"")).count();
    assert_eq!(lines("a.jsonl"), 3 * 40);
    assert_eq!(lines("b.jsonl"), 3 * 20);
}

#[test]
fn report_lists_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir(d.join("in")).unwrap();
    let out = run(d, &["--seed", "1", "report", "--dir", "in", "--out", "out"]);
    assert_eq!(out.status.code(), Some(4));
    let msg = stderr_json(&out)["message"].as_str().unwrap().to_owned();
    for f in ["data.jsonl", "decoherence.json", "init.json", "fit_on.json", "amplitudes.json"] {
        assert!(msg.contains(f), "{msg}");
    }
}

#[test]
fn epsilon_of_identical_sets_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    theory(d);
    let out = ok(d, &["--seed", "4", "epsilon", "--a", "truth.json", "--b", "truth.json", "--configs", "50", "--repeats", "2"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["epsilon"].as_f64().unwrap(), 0.0);
}

/// From theory couplings to the report tables; a rerun reproduces every byte.
#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    theory(d);
    zero_model(d);
    fs::create_dir(d.join("rep")).unwrap();
    let noise = ["--gamma-cor", "0.02", "--gamma-ind", "0.03"];
    let mut gen = vec!["--seed", "7", "generate", "--model", "truth.json", "--shots", "2000", "--out", "rep/data.jsonl"];
    gen.extend(noise);
    ok(d, &gen);
    let mut gen0 = vec!["--seed", "8", "generate", "--model", "zero.json", "--shots", "2000", "--out", "zero.jsonl"];
    gen0.extend(noise);
    ok(d, &gen0);

    ok(d, &["estimate", "--data", "zero.jsonl", "--out", "zero_obs.json"]);
    ok(d, &["fit", "--scheme", "decoherence", "--train", "zero_obs.json", "--out", "rep/decoherence.json"]);
    let dec = read(d, "rep/decoherence.json");
    assert_eq!(dec["scheme"], "decoherence");

    ok(
        d,
        &["--seed", "9", "estimate", "--data", "rep/data.jsonl", "--out", "train.json", "--test-fraction", "0.3", "--test-out", "test.json"],
    );
    let mut init = read(d, "truth.json");
    for j in init["j_upper"].as_array_mut().unwrap() {
        *j = json!(j.as_f64().unwrap() * 1.2);
    }
    write(d, "rep/init.json", &init);
    ok(
        d,
        &[
            "fit", "--scheme", "on2", "--train", "train.json", "--test", "test.json", "--decoherence",
            "rep/decoherence.json", "--init", "rep/init.json", "--out", "fit_on2.json", "--curve", "curve.csv",
        ],
    );
    let fit = read(d, "fit_on2.json");
    assert_eq!(fit["status"], "converged");
    assert!(fit["test_rss"].as_f64().unwrap() > 0.0);
    assert!(fs::read_to_string(d.join("curve.csv")).unwrap().starts_with("iteration,train_rss,test_rss"));

    write(d, "guess.json", &json!([vec![27.0; N], vec![22.0; N]]));
    ok(
        d,
        &[
            "fit", "--scheme", "on", "--train", "train.json", "--decoherence", "rep/decoherence.json", "--modes",
            "modes.json", "--tones", "tones.json", "--amplitudes", "guess.json", "--out", "rep/fit_on.json",
        ],
    );
    fs::copy(d.join("amplitudes.json"), d.join("rep/amplitudes.json")).unwrap();

    let out = ok(d, &["--seed", "10", "epsilon", "--a", "fit_on2.json", "--b", "truth.json", "--configs", "200", "--repeats", "2"]);
    let eps: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(eps["epsilon"].as_f64().unwrap() < 0.05, "{eps}");

    let report = |out: &str, threads: &str| {
        ok(
            d,
            &[
                "--seed", "11", "--threads", threads, "report", "--dir", "rep", "--out", out, "--sizes", "250,500,1000",
                "--pairs", "1", "--configs", "100", "--repeats", "2",
            ],
        );
    };
    report("out1", "1");
    report("out2", "2");
    let tables = ["rss_vs_m.csv", "epsilon_vs_m.csv", "learning_curve.csv", "omega_ratio.csv", "kbody_validation.csv", "summary.json"];
    for t in tables {
        let a = fs::read(d.join("out1").join(t)).unwrap();
        let b = fs::read(d.join("out2").join(t)).unwrap();
        assert!(!a.is_empty(), "{t} empty");
        assert_eq!(a, b, "{t} differs between runs");
    }
    let rss = fs::read_to_string(d.join("out1/rss_vs_m.csv")).unwrap();
    assert_eq!(rss.lines().count(), 4);
    let ratios = fs::read_to_string(d.join("out1/omega_ratio.csv")).unwrap();
    for line in ratios.lines().skip(1) {
        let r: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((r - 1.0).abs() < 0.1, "{line}");
    }
}
