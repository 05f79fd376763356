use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "--frames",
    "4",
    "--points-per-frame",
    "128",
    "--components",
    "32",
    "--batch",
    "16",
    "--n-reassign",
    "4",
    "--eval-points",
    "400",
];

fn mpvbgs(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpvbgs"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = mpvbgs(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn profile_reports_split_and_memory_gap() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["profile"]);
    let p = json(&dir.path().join("profile.json"));
    assert_eq!(p["outputs_equal"], Value::Bool(true));
    let modes = p["modes"].as_array().unwrap();
    for m in modes {
        let total: f64 = ["elbo_percent", "stats_percent", "other_percent"]
            .iter()
            .map(|k| m[k].as_f64().unwrap())
            .sum();
        assert!((total - 100.0).abs() <= 0.1, "{total}");
    }
    let peak = |i: usize| modes[i]["stats_peak_bytes"].as_u64().unwrap();
    assert!(peak(1) > peak(0));
    assert!(dir.path().join("traces/baseline_stats.csv").exists());
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "profile");
    assert_eq!(manifest["config"]["model"]["components"], 32);
}

#[test]
fn search_is_deterministic_and_reports_agreement() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        ok(dir.path(), &["search", "--function", "stats", "--compare-seed", "9"]);
    }
    let map = |d: &Path| fs::read(d.join("maps/sum_stats_over_samples.json")).unwrap();
    assert_eq!(map(a.path()), map(b.path()));
    let agreement = json(&a.path().join("reports/sum_stats_over_samples.agreement.json"));
    let f = agreement["agreement"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f));
}

#[test]
fn unknown_function_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mpvbgs(dir.path(), &["search", "--function", "nope"]).status.code(), Some(2));
}

#[test]
fn train_with_maps_then_eval_appends_row() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["search", "--function", "elbo"]);
    ok(d, &["search", "--function", "stats"]);
    let elbo = d.join("maps/compute_elbo_delta.json");
    let stats = d.join("maps/sum_stats_over_samples.json");
    ok(
        d,
        &["train", "--elbo-map", elbo.to_str().unwrap(), "--stats-map", stats.to_str().unwrap()],
    );
    let rows = |d: &Path| fs::read_to_string(d.join("metrics.csv")).unwrap().lines().count();
    assert_eq!(rows(d), 5);
    assert!(d.join("checkpoint.json").exists());
    ok(d, &["eval"]);
    assert_eq!(rows(d), 6);
    let e = json(&d.join("eval.json"));
    assert!(e["psnr_mean"].as_f64().unwrap().is_finite());
}

#[test]
fn missing_and_stale_maps_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = mpvbgs(d, &["train", "--elbo-map", "absent.json", "--stats-map", "absent.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.json"));

    ok(d, &["search", "--function", "elbo"]);
    ok(d, &["search", "--function", "stats"]);
    let elbo = d.join("maps/compute_elbo_delta.json");
    let stats = d.join("maps/sum_stats_over_samples.json");
    // A different batch size changes both graph fingerprints.
    let o = Command::new(env!("CARGO_BIN_EXE_mpvbgs"))
        .args(["train", "--out"])
        .arg(d)
        .args(["--components", "32", "--batch", "8", "--frames", "2", "--points-per-frame", "64"])
        .arg("--elbo-map")
        .arg(&elbo)
        .arg("--stats-map")
        .arg(&stats)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_config_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "frams = 3\n").unwrap();
    let o = mpvbgs(dir.path(), &["profile", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_and_scene_file_are_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("scene.toml"), "family = \"sphere_cluster\"\nextent = [4.0, 4.0, 4.0]\nseed = 3\nspheres = 3\n").unwrap();
    fs::write(d.join("run.toml"), "scene = \"scene.toml\"\nepsilon = 1e-5\n[model]\ntemperature = 0.5\n").unwrap();
    let cfg = d.join("run.toml");
    ok(d, &["profile", "--config", cfg.to_str().unwrap()]);
    let m = json(&d.join("manifest.json"));
    assert_eq!(m["scene"]["family"], "sphere_cluster");
    assert_eq!(m["seeds"]["scene"], 3);
    assert_eq!(m["config"]["epsilon"].as_f64(), Some(1e-5));
    assert_eq!(m["config"]["model"]["temperature"].as_f64(), Some(0.5));
}

#[test]
fn sweep_emits_one_row_per_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["sweep", "--epsilons", "1e-7,1e-6,1e-5,1e-4"]);
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv, out);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().filter(|r| r.ends_with('*')).count() <= 1);
    let s = json(&dir.path().join("sweep.json"));
    for r in s["rows"].as_array().unwrap() {
        let eps = r["epsilon"].as_f64().unwrap();
        assert!(r["err_elbo"].as_f64().unwrap() <= eps);
        assert!(r["err_stats"].as_f64().unwrap() <= eps);
    }
}
