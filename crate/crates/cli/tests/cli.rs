use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moe-offload"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_spec(dir: &Path, body: &str) -> String {
    let path = dir.join("spec.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

/// Data lines of a CSV file (header dropped), split on commas.
fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn header(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .split(',')
        .map(str::to_string)
        .collect()
}

fn col(path: &Path, name: &str) -> usize {
    header(path).iter().position(|h| h == name).unwrap()
}

const SMALL_GEN: &str = r#""traces": {"source": "generate", "gen": {"num_tokens": 4}, "prefill_tokens": 8}"#;

#[test]
fn minimal_run_writes_one_row_per_phase() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        &format!(r#"{{{SMALL_GEN}, "strategies": ["fate"], "seeds": [0], "output": "out"}}"#),
    );
    let out = run(&["run", "--spec", &spec]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = dir.path().join("out/comparison.csv");
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 2);
    for field in ["run_id", "strategy", "phase", "budget_bytes", "ttft_ms", "tpot_ms", "tokens_per_s", "recall", "hit_rate", "stall_ms"] {
        assert!(header(&csv).iter().any(|h| h == field), "missing column {field}");
    }
    assert!(dir.path().join("out/summary.json").exists());
    assert_eq!(fs::read_dir(dir.path().join("out/timelines")).unwrap().count(), 2);
}

#[test]
fn full_matrix_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        &format!(
            r#"{{{SMALL_GEN}, "strategies": ["fate", "eap", "lod"],
               "budgets": [4500000000, 5000000000, 6000000000, 7000000000, 8000000000],
               "seeds": [1, 2, 3], "write_timelines": false}}"#
        ),
    );
    let out_dir = dir.path().join("matrix");
    let out = run(&["run", "--spec", &spec, "--out", out_dir.to_str().unwrap(), "--jobs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(csv_rows(&out_dir.join("comparison.csv")).len(), 90);
    assert!(!out_dir.join("timelines").exists());
}

#[test]
fn missing_trace_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        r#"{"traces": {"source": "files", "decode": "nope.jsonl"}, "strategies": ["lod"], "seeds": [0], "output": "out"}"#,
    );
    let out = run(&["run", "--spec", &spec]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["code"], "TRACE_NOT_FOUND");
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["run", "--spec", dir.path().join("absent.json").to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["code"], "SPEC_NOT_FOUND");

    let spec = write_spec(dir.path(), &format!(r#"{{{SMALL_GEN}, "strategies": ["warp"], "seeds": [0]}}"#));
    let out = run(&["run", "--spec", &spec, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["code"], "INVALID_STRATEGY");

    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn sweep_lod_flat_fate_rising() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        &format!(
            r#"{{{SMALL_GEN}, "strategies": ["fate", "lod"],
               "budgets": [4200000000, 5000000000, 6500000000, 8000000000, 12000000000],
               "seeds": [0], "output": "sweep", "write_timelines": false}}"#
        ),
    );
    let out = run(&["sweep", "--spec", &spec]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = dir.path().join("sweep/sweep.csv");
    let (s, p, b, t) = (col(&csv, "strategy"), col(&csv, "phase"), col(&csv, "budget_bytes"), col(&csv, "tokens_per_s"));
    let series = |name: &str| -> Vec<(u64, String)> {
        let mut v: Vec<(u64, String)> = csv_rows(&csv)
            .into_iter()
            .filter(|r| r[s] == name && r[p] == "decode")
            .map(|r| (r[b].parse().unwrap(), r[t].clone()))
            .collect();
        v.sort();
        v
    };
    let lod = series("lod");
    assert_eq!(lod.len(), 5);
    assert!(lod.iter().all(|(_, x)| *x == lod[0].1));
    let fate: Vec<f64> = series("fate").iter().map(|(_, x)| x.parse().unwrap()).collect();
    assert!(fate.windows(2).all(|w| w[1] >= w[0]), "{fate:?}");

    let decreasing = write_spec(
        dir.path(),
        &format!(r#"{{{SMALL_GEN}, "strategies": ["lod"], "budgets": [6000000000, 5000000000], "seeds": [0], "output": "bad"}}"#),
    );
    let out = run(&["sweep", "--spec", &decreasing]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_writes_stages() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        &format!(r#"{{{SMALL_GEN}, "strategies": ["fate"], "seeds": [0, 1], "output": "abl", "write_timelines": false}}"#),
    );
    let out = run(&["ablate", "--spec", &spec]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stages: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("abl/ablation.json")).unwrap()).unwrap();
    let names: Vec<&str> = stages.as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(names, ["lod", "prefetch", "prefetch+cache", "prefetch+cache+quant"]);
    assert!(dir.path().join("abl/ablation.csv").exists());
}

#[test]
fn generated_traces_feed_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("traces");
    let out = run(&["gen-trace", "--seed", "3", "--tokens", "3", "--prefill-tokens", "4", "--out", traces.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["decode.jsonl", "prefill.jsonl", "weights.json"] {
        assert!(traces.join(f).exists(), "{f} missing");
    }
    let spec = write_spec(
        dir.path(),
        r#"{"traces": {"source": "files", "decode": "traces/decode.jsonl", "prefill": "traces/prefill.jsonl", "weights": "traces/weights.json"},
            "strategies": ["fate", "eap", "lod"], "seeds": [0], "output": "out"}"#,
    );
    let out = run(&["run", "--spec", &spec]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(csv_rows(&dir.path().join("out/comparison.csv")).len(), 6);
}

#[test]
fn probe_study_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["probe-study", "--tokens", "8", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = dir.path().join("probe_study.csv");
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 3);
    let sim = col(&csv, "mean_similarity");
    let v: Vec<f64> = rows.iter().map(|r| r[sim].parse().unwrap()).collect();
    assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
    assert!(dir.path().join("probe_study.json").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        &format!(r#"{{{SMALL_GEN}, "strategies": ["fate", "eap"], "budgets": [5000000000, 9000000000], "seeds": [4, 5]}}"#),
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["run", "--spec", &spec, "--out", a.to_str().unwrap(), "--jobs", "1"]).status.success());
    assert!(run(&["run", "--spec", &spec, "--out", b.to_str().unwrap(), "--jobs", "4"]).status.success());
    for f in ["comparison.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let mut names: Vec<_> = fs::read_dir(a.join("timelines")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 16);
    for n in names {
        assert_eq!(fs::read(a.join("timelines").join(&n)).unwrap(), fs::read(b.join("timelines").join(&n)).unwrap());
    }
}
