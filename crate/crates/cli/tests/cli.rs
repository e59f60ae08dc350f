use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_stad-lab");

/// Settings small enough for an unoptimized binary.
const TINY: &[&str] = &[
    "--set",
    "target.n_train=1000",
    "--set",
    "teacher.train.steps=60",
    "--set",
    "teacher.net.hidden=[16]",
    "--set",
    "head.hidden=[16]",
    "--set",
    "distill.steps=40",
    "--set",
    "distill.cache_size=2000",
    "--set",
    "likelihood.n_test=6",
];

fn lab(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--out")
        .arg(out)
        .env("STAD_LAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = lab(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn tiny(extra: &[&str]) -> Vec<String> {
    extra.iter().chain(TINY).map(|s| s.to_string()).collect()
}

fn args(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// CSV body with the wall-time column dropped.
fn body_without_wall(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let wall = header.iter().position(|h| *h == "wall_time").unwrap();
    lines
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(wall);
            f.join(",")
        })
        .collect()
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn small_trace_benchmark_is_fast() {
    let dir = TempDir::new().unwrap();
    let start = Instant::now();
    ok(dir.path(), &["bench-trace", "--dims", "4", "--trials", "10"]);
    assert!(start.elapsed().as_secs_f64() < 1.0);
    let csv = std::fs::read_to_string(dir.path().join("bench_trace.csv")).unwrap();
    assert!(csv.starts_with("estimator,"));
    assert!(csv.lines().count() > 10);
}

#[test]
fn malformed_config_exits_2_with_position() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"target\": {,\n}").unwrap();
    let o = lab(dir.path(), &["report", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2 column"), "{err}");
}

#[test]
fn unknown_override_exits_2() {
    let dir = TempDir::new().unwrap();
    let o = lab(dir.path(), &["loglik", "--set", "likelihood.tolerance=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_teacher_exits_3() {
    let dir = TempDir::new().unwrap();
    let o = lab(dir.path(), &["distill"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(lab(dir.path(), &["report"]).status.code(), Some(3));
}

#[test]
fn checkpoint_shape_mismatch_exits_4() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &args(&tiny(&["train-score"])));
    let o = lab(
        dir.path(),
        &args(&tiny(&["loglik", "--set", "target.kind=standard_normal", "--set", "target.dim=3"])),
    );
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exact_loglik_matches_closed_form_gaussian() {
    let dir = TempDir::new().unwrap();
    ok(
        dir.path(),
        &[
            "loglik",
            "--backend",
            "exact",
            "--set",
            "teacher.kind=analytic",
            "--set",
            "target.kind=gaussian",
            "--set",
            "target.means=[[0.5,-1.0]]",
            "--set",
            "target.covs=[[[1.5,0.4],[0.4,0.7]]]",
            "--set",
            "likelihood.n_test=20",
        ],
    );
    let csv = dir.path().join("loglik_exact.csv");
    let (lp, truth) = (column(&csv, "log_prob"), column(&csv, "target_log_prob"));
    assert_eq!(lp.len(), 20);
    for (a, b) in lp.iter().zip(&truth) {
        assert!((a - b).abs() <= 1e-3, "{a} vs {b}");
    }
}

#[test]
fn same_seed_reproduces_csv_bodies() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let run = tiny(&["loglik", "--backend", "hutchinson", "--seed", "9", "--set", "teacher.kind=analytic"]);
    ok(a.path(), &args(&run));
    ok(b.path(), &args(&run));
    let f = "loglik_hutchinson_1.csv";
    assert_eq!(body_without_wall(&a.path().join(f)), body_without_wall(&b.path().join(f)));
}

#[test]
fn effective_config_reruns_identically() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    ok(
        a.path(),
        &args(&tiny(&["loglik", "--backend", "xtrace", "--n-probes", "2", "--seed", "4", "--set", "teacher.kind=analytic"])),
    );
    let cfg = a.path().join("loglik.config.json");
    ok(b.path(), &["loglik", "--config", cfg.to_str().unwrap()]);
    let f = "loglik_xtrace_2.csv";
    assert_eq!(body_without_wall(&a.path().join(f)), body_without_wall(&b.path().join(f)));
}

#[test]
fn recipe_emits_metrics_for_every_backend() {
    let dir = TempDir::new().unwrap();
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/recipe.sh");
    let o = Command::new("bash")
        .arg(script)
        .args(TINY)
        .env("STAD_LAB_BIN", BIN)
        .env("OUT", dir.path())
        .env("STAD_LAB_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "backend,n_probes,mean_resid,std_resid,mae,speedup,rnfe,wall_s");
    let backends: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    for b in ["exact", "hutchinson(1)", "hutchpp(2)", "xtrace(2)", "stad", "direct_h1", "direct_h1b"] {
        assert!(backends.contains(&b), "{b} missing from {backends:?}");
    }
    assert!(dir.path().join("residual_hist_stad.csv").exists());
}
