use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use specbatch::formats;
use specbatch_core::{AcceptanceTrace, PowerLawFit};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn specbatch(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specbatch")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Writes a config into `dir` and returns its path; calibration and trace
/// default to the shipped files.
fn write_config(dir: &Path, name: &str, mut config: Value) -> PathBuf {
    let obj = config.as_object_mut().unwrap();
    obj.entry("calibration").or_insert(json!(data("rtx3090-like.json")));
    obj.entry("trace").or_insert(json!(data("rtx3090-like-trace.csv")));
    obj.entry("out_dir").or_insert(json!("out"));
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn run_ok(dir: &Path, cmd: &str, config: &Path) {
    let out = specbatch(&[cmd, "--config", config.to_str().unwrap()], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

/// Data rows of a CSV as maps keyed by header, skipping metadata lines.
fn rows(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = reader.headers().unwrap().clone();
    reader
        .records()
        .map(|r| headers.iter().map(String::from).zip(r.unwrap().iter().map(String::from)).collect())
        .collect()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().find(|l| !l.starts_with('#')).unwrap().to_string()
}

fn f(v: &str) -> f64 {
    v.parse().unwrap()
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&specbatch(&["sweep", "--config", "missing.json"], d)), 2);
    assert_eq!(code(&specbatch(&["sweep"], d)), 2);
    assert_eq!(code(&specbatch(&["bogus"], d)), 2);

    fs::write(d.join("broken.json"), "{ not json").unwrap();
    assert_eq!(code(&specbatch(&["sweep", "--config", "broken.json"], d)), 2);

    let cfg = write_config(d, "nocal.json", json!({"calibration": "nowhere.json"}));
    let out = specbatch(&["sweep", "--config", cfg.to_str().unwrap()], d);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.json"));

    let cfg = write_config(d, "policy.json", json!({"policies": ["fixed-two"]}));
    assert_eq!(code(&specbatch(&["dynamic", "--config", cfg.to_str().unwrap()], d)), 2);

    let cfg = write_config(d, "kind.json", json!({"kind": "timeline"}));
    assert_eq!(code(&specbatch(&["sweep", "--config", cfg.to_str().unwrap()], d)), 2);

    let cfg = write_config(d, "fit.json", json!({}));
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("trace");
    fs::write(&cfg, v.to_string()).unwrap();
    assert_eq!(code(&specbatch(&["fit", "--config", cfg.to_str().unwrap()], d)), 2);

    assert_eq!(code(&specbatch(&["profile", "--sizes", "1,2"], d)), 2);
    let cal = data("rtx3090-like.json");
    assert_eq!(code(&specbatch(&["profile", "--calibration", cal.to_str().unwrap(), "--sizes", "1,3"], d)), 2);
    assert_eq!(code(&specbatch(&["profile", "--calibration", cal.to_str().unwrap(), "--mode", "guess"], d)), 2);
}

#[test]
fn profile_from_flags_writes_a_table_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cal = data("rtx3090-like.json");
    let trace = data("rtx3090-like-trace.csv");
    let args = [
        "profile", "--calibration", cal.to_str().unwrap(), "--trace", trace.to_str().unwrap(), "--sizes", "1,2,4,8,16,32",
        "--grid", "0..8", "--mode", "simulated", "--samples", "200", "--out", "lut.csv",
    ];
    let out = specbatch(&args, dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let path = dir.path().join("lut.csv");
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.contains("# mode=simulated\n") && text.contains("# calibration=rtx3090-like\n"));
    assert!(text.lines().any(|l| l.starts_with("# seed=")));
    assert_eq!(header(&path), "batch_size,spec_len");
    let lut = formats::read_lut(&path).unwrap();
    assert_eq!(lut.entries().len(), 6);
    assert!(lut.entries().windows(2).all(|w| w[1].1 <= w[0].1));

    // Without a trace the table is profiled against the calibration's curve.
    let out = specbatch(&["profile", "--calibration", cal.to_str().unwrap(), "--mode", "analytic", "--out", "a.csv"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(fs::read_to_string(dir.path().join("a.csv")).unwrap().contains("# mode=analytic"));
}

#[test]
fn sweep_schema_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sweep.json", json!({"seed": 4}));
    run_ok(dir.path(), "sweep", &cfg);
    let path = dir.path().join("out/sweep.csv");
    assert_eq!(header(&path), "batch_size,spec_len,steps,total_ms,tokens,per_token_ms,optimal");
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# config_hash=") && text.contains("\n# seed=4\n"));
    let cells = rows(&path);
    assert_eq!(cells.len(), 54);
    for b in ["1", "2", "4", "8", "16", "32"] {
        let row: Vec<_> = cells.iter().filter(|c| c["batch_size"] == b).collect();
        assert_eq!(row.len(), 9);
        assert_eq!(row.iter().filter(|c| c["optimal"] == "true").count(), 1);
        let best = row.iter().map(|c| f(&c["per_token_ms"])).fold(f64::INFINITY, f64::min);
        let marked = row.iter().find(|c| c["optimal"] == "true").unwrap();
        assert_eq!(f(&marked["per_token_ms"]), best);
    }

    let out = specbatch(&["sweep", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", "other"], dir.path());
    assert_eq!(code(&out), 0);
    let other = fs::read_to_string(dir.path().join("other/sweep.csv")).unwrap();
    assert!(other.contains("\n# seed=9\n"));
    assert_ne!(other.lines().next(), text.lines().next(), "config hash must cover the seed");
}

#[test]
fn sweep_single_plain_cell_costs_one_step_per_token() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", json!({"profile": {"sizes": [1], "grid": [0]}}));
    run_ok(dir.path(), "sweep", &cfg);
    let cells = rows(&dir.path().join("out/sweep.csv"));
    assert_eq!(cells.len(), 1);
    assert!((f(&cells[0]["per_token_ms"]) - 20.4).abs() < 1e-9);
    assert_eq!(cells[0]["optimal"], "true");
}

#[test]
fn sweep_optimum_falls_with_batch_size_and_hopeless_trace_never_speculates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cal = json!({
        "alpha": [[1, 1.0], [2, 1.3], [4, 1.8], [8, 2.6], [16, 4.0], [32, 6.5]],
        "beta": 5.0,
        "ssm_step": [[1, 0.2], [32, 0.2]],
        "acceptance": {"c": 0.9, "gamma": 0.548}
    });
    fs::write(d.join("cal.json"), cal.to_string()).unwrap();
    let trace = AcceptanceTrace::from_power_law(PowerLawFit::new(0.9, 0.548).unwrap(), 200, 80).unwrap();
    formats::write_trace(&d.join("trace.csv"), &trace).unwrap();
    let cfg = write_config(d, "c.json", json!({"calibration": "cal.json", "trace": "trace.csv"}));
    run_ok(d, "sweep", &cfg);
    let best: Vec<usize> = rows(&d.join("out/sweep.csv"))
        .iter()
        .filter(|c| c["optimal"] == "true")
        .map(|c| c["spec_len"].parse().unwrap())
        .collect();
    assert_eq!(best.len(), 6);
    assert!(best.windows(2).all(|w| w[1] <= w[0]), "{best:?}");

    fs::write(d.join("hopeless.csv"), "# horizon=8\nprompt_id,correct_tokens\n0,0\n1,0\n").unwrap();
    let cfg = write_config(d, "h.json", json!({"calibration": "cal.json", "trace": "hopeless.csv", "out_dir": "hopeless"}));
    run_ok(d, "sweep", &cfg);
    let cells = rows(&d.join("hopeless/sweep.csv"));
    assert!(cells.iter().filter(|c| c["optimal"] == "true").all(|c| c["spec_len"] == "0"));
}

#[test]
fn uniform_with_plain_table_is_exactly_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("zero.csv"), "# seed=0\n# mode=analytic\n# calibration=x\nbatch_size,spec_len\n1,0\n32,0\n").unwrap();
    let cfg = write_config(d, "u.json", json!({"lut": "zero.csv", "workload": {"count": 100}}));
    run_ok(d, "uniform", &cfg);
    let path = d.join("out/uniform.csv");
    assert_eq!(header(&path), "batch_size,spec_len,adaptive_ms,baseline_ms,normalized_latency,speedup");
    let out = rows(&path);
    assert_eq!(out.len(), 6);
    assert!(out.iter().all(|r| f(&r["normalized_latency"]) == 1.0 && f(&r["speedup"]) == 1.0));

    let cfg = write_config(d, "s.json", json!({"workload": {"count": 100, "batch_sizes": [1]}, "out_dir": "spec"}));
    run_ok(d, "uniform", &cfg);
    let out = rows(&d.join("spec/uniform.csv"));
    assert!(f(&out[0]["normalized_latency"]) < 1.0 && f(&out[0]["speedup"]) > 1.0);
}

#[test]
fn dynamic_outputs_and_sparse_limit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(
        d,
        "d.json",
        json!({
            "policies": ["none", "fixed-2", "adaptive"],
            "workload": {"count": 60, "intervals": [0.2, 10.0], "cvs": [1.0]}
        }),
    );
    run_ok(d, "dynamic", &cfg);
    let grid = rows(&d.join("out/dynamic.csv"));
    assert_eq!(header(&d.join("out/dynamic.csv")), "cv,interval_s,policy,avg_latency_s");
    assert_eq!(grid.len(), 6);

    let workload = d.join("out/workloads/cv1_iv10.csv");
    assert_eq!(header(&workload), "request_id,arrival_s,gen_len");
    assert_eq!(formats::read_workload(&workload).unwrap().len(), 60);

    let records = d.join("out/runs/cv1_iv10_adaptive.records.csv");
    assert_eq!(header(&records), formats::RECORD_COLUMNS.join(","));
    let recs = rows(&records);
    assert!(recs.iter().all(|r| r["batch_size"] == "1" && r["policy"] == "adaptive"));

    // Sparse traffic never batches, so adaptive runs the b = 1 entry.
    let lut = formats::read_lut(&d.join("out/lut.csv")).unwrap();
    let s1 = lut.lookup(1).chosen_s;
    assert!(recs.iter().all(|r| r["spec_len"] == s1.to_string()));

    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("out/runs/cv1_iv10_adaptive.report.json")).unwrap()).unwrap();
    for key in ["policy", "seed", "avg_latency_s", "timeline", "config_hash"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["timeline"].as_array().unwrap().len(), 2);
    let mean = recs.iter().map(|r| f(&r["latency_s"])).sum::<f64>() / 60.0;
    assert!((report["avg_latency_s"].as_f64().unwrap() - mean).abs() < 1e-12);

    // Same workload file for every policy: identical arrival columns.
    let arrivals = |p: &str| -> Vec<String> {
        rows(&d.join(format!("out/runs/cv1_iv0.2_{p}.records.csv"))).iter().map(|r| r["t_a_s"].clone()).collect()
    };
    assert_eq!(arrivals("none"), arrivals("adaptive"));
}

#[test]
fn timeline_phases_and_degenerate_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "t.json", json!({"seed": 1}));
    run_ok(d, "timeline", &cfg);
    for p in ["none", "fixed-2", "fixed-4", "adaptive"] {
        let path = d.join(format!("out/timeline-{p}.csv"));
        assert_eq!(header(&path), "group_start_s,avg_latency_s");
        assert!(fs::read_to_string(&path).unwrap().contains(&format!("# policy={p}\n")));
    }
    let phases = rows(&d.join("out/timeline_phases.csv"));
    let avg = |policy: &str, interval: f64| {
        let sel: Vec<_> = phases.iter().filter(|r| r["policy"] == policy && f(&r["interval_s"]) == interval).collect();
        let n: f64 = sel.iter().map(|r| f(&r["requests"])).sum();
        sel.iter().map(|r| f(&r["avg_latency_s"]) * f(&r["requests"])).sum::<f64>() / n
    };
    // Intense traffic forms large batches that favour short speculation;
    // sparse traffic favours longer speculation.
    assert!(avg("fixed-2", 0.2) < avg("fixed-4", 0.2));
    assert!(avg("fixed-4", 1.0) < avg("fixed-2", 1.0));

    let cfg = write_config(
        d,
        "flat.json",
        json!({"workload": {"phases": [{"duration": 150.0, "interval": 0.3, "cv": 1.0}], "repeat": 1}, "out_dir": "flat"}),
    );
    run_ok(d, "timeline", &cfg);
    let summary = rows(&d.join("flat/timeline_summary.csv"));
    let lat = |p: &str| f(&summary.iter().find(|r| r["policy"] == p).unwrap()["avg_latency_s"]);
    assert!(lat("adaptive") <= 1.03 * lat("fixed-2").min(lat("fixed-4")));
}

#[test]
fn fit_recovers_the_shipped_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "f.json", json!({"step_samples": data("rtx3090-like-steps.csv")}));
    run_ok(d, "fit", &cfg);
    let (fitted, _) = formats::read_calibration(&d.join("out/calibration.json")).unwrap();
    let (shipped, _) = formats::read_calibration(&data("rtx3090-like.json")).unwrap();
    for (a, b) in fitted.steps.alpha_points().iter().zip(shipped.steps.alpha_points()) {
        assert_eq!(a.0, b.0);
        assert!((a.1 - b.1).abs() < 1e-9);
    }
    assert!((fitted.steps.beta() - 20.0).abs() < 1e-9);
    assert_eq!(fitted.steps.ssm_points(), shipped.steps.ssm_points());
    assert!((fitted.acceptance.c() - 0.9).abs() < 0.02 && (fitted.acceptance.gamma() - 0.548).abs() < 0.02);
    let fit_rows = rows(&d.join("out/acceptance_fit.csv"));
    assert_eq!(fit_rows.len(), 8);
    assert_eq!(header(&d.join("out/step_fit.csv")), "batch_size,slope,intercept,non_positive_slope");
    let json: Value = serde_json::from_str(&fs::read_to_string(d.join("out/calibration.json")).unwrap()).unwrap();
    assert!(json["config_hash"].is_string() && json["seed"].is_u64());
}

#[test]
fn shipped_trace_follows_the_shipped_curve() {
    let trace = formats::read_trace(&data("rtx3090-like-trace.csv")).unwrap();
    let (cal, _) = formats::read_calibration(&data("rtx3090-like.json")).unwrap();
    assert_eq!(trace, AcceptanceTrace::from_power_law(cal.acceptance, 200, 80).unwrap());
}
