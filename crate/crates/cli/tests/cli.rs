//! Smoke tests through the installed binary: argument plumbing, file
//! outputs, and exit-code discipline. Statistical behavior is covered by
//! the core crate's suites; everything here runs at toy scale.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_debinet"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("debinet_cli_{tag}_{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary should launch")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("stdout was not JSON ({e}): {text}"))
}

#[test]
fn gen_then_fit_csv_round_trip() {
    let dir = temp_dir("roundtrip");
    let csv = dir.join("table1.csv");
    let out = run(bin()
        .args(["gen", "--regime", "table1", "--n", "400", "--seed", "5"])
        .arg("--out")
        .arg(&csv));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("d0,"), "header was {header}");
    assert!(header.ends_with(",y"));
    assert_eq!(text.lines().count(), 401);

    let out = run(bin()
        .args([
            "plm-nw", "--d-cols", "d0", "--y-col", "y", "--h-y", "2", "--h-d", "2",
        ])
        .arg("--data")
        .arg(&csv));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["beta_hat"].as_array().unwrap().len(), 1);
    assert!(report["beta_hat"][0].as_f64().unwrap().is_finite());
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn debias_writes_replicate_files() {
    let dir = temp_dir("debias");
    let prefix = dir.join("run");
    let out = run(bin()
        .args([
            "debias",
            "--method",
            "ols-post",
            "--n",
            "120",
            "--p",
            "40",
            "--k",
            "5",
            "--replicates",
            "2",
            "--lambda-frac",
            "0.3",
        ])
        .arg("--out")
        .arg(&prefix));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.join("run_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "header plus two replicates");
    let reps: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run_replicates.json")).unwrap())
            .unwrap();
    assert_eq!(reps.as_array().unwrap().len(), 2);
    assert!(reps[0]["beta_hat"].is_array());
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn bench_run_writes_outputs_and_check_gates_exit() {
    let dir = temp_dir("bench");
    let prefix = dir.join("tiny");
    let config = dir.join("tiny.json");
    fs::write(
        &config,
        format!(
            r#"{{
  "scenario": "table2_high_low",
  "replicates": 1,
  "seed": 0,
  "methods": ["ols_post"],
  "scale": {{"n": 80, "p": 60, "k": 5}},
  "include_timings": false,
  "output": "{}"
}}"#,
            prefix.display()
        ),
    )
    .unwrap();

    let out = run(bin().args(["bench", "run", "--config"]).arg(&config));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("tiny_metrics.csv").exists());
    assert!(dir.join("tiny_summary.json").exists());

    // The same run under --check fails: the scenario's checks need the
    // debinet method and desk-scale statistics, neither present here.
    let checked = run(bin().args(["bench", "run", "--check", "--config"]).arg(&config));
    assert_eq!(checked.status.code(), Some(1));
    let text = String::from_utf8_lossy(&checked.stdout);
    assert!(text.contains("FAIL"), "check output was: {text}");
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn convergence_trace_has_every_epoch() {
    let dir = temp_dir("conv");
    let prefix = dir.join("trace");
    let out = run(bin()
        .args([
            "bench",
            "convergence",
            "--n",
            "24",
            "--width",
            "256",
            "--epochs",
            "60",
        ])
        .arg("--out")
        .arg(&prefix));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(dir.join("trace_convergence.csv")).unwrap();
    assert_eq!(trace.lines().count(), 62, "header plus epochs 0..=60");
    assert!(dir.join("trace_summary.json").exists());
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn estimators_report_finite_effects() {
    for sub in ["plm-nn", "plm-nw", "dml"] {
        let out = run(bin().args([
            sub,
            "--scenario",
            "table1",
            "--n",
            "300",
            "--seed",
            "1",
        ]));
        assert!(
            out.status.success(),
            "{sub}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let report = stdout_json(&out);
        let beta = report["beta_hat"][0].as_f64().unwrap();
        assert!(beta.is_finite(), "{sub} returned {beta}");
        // The generator's treatment effect is 1; toy scale only needs the
        // right neighborhood, not the acceptance-grade tolerance.
        assert!((beta - 1.0).abs() < 0.5, "{sub} returned {beta}");
    }
}

#[test]
fn bad_usage_exits_nonzero() {
    // Generator and CSV sources are mutually exclusive.
    let out = run(bin().args([
        "plm-nn",
        "--scenario",
        "table1",
        "--data",
        "does-not-matter.csv",
    ]));
    assert!(!out.status.success());

    // A missing config file is an error, not a silent default.
    let out = run(bin().args(["bench", "run", "--config", "no-such-file.json"]));
    assert_eq!(out.status.code(), Some(1));

    // Unknown scenario names are rejected by the parser.
    let out = run(bin().args(["gen", "--regime", "table9", "--out", "x.csv"]));
    assert!(!out.status.success());
}
