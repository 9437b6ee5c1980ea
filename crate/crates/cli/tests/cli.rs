use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn write_spec(dir: &Path, name: &str, spec: &Value) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(spec).unwrap()).unwrap();
    path
}

fn tiny_spec(out: &Path) -> Value {
    serde_json::json!({
        "simulation": { "n_units": 20, "horizon": 8 },
        "train": {
            "max_epochs": 3, "pretrain_epochs": 2, "gap_epoch": 1,
            "hidden_width": 8, "head_hidden": 8, "lambda": 0.01, "min_group_size": 2
        },
        "eval": { "tau_max": 3 },
        "seeds": [0],
        "out_dir": out
    })
}

fn run(args: &[&str], spec: &Path) -> (i32, Value, Output) {
    run_env(args, spec, &[])
}

fn run_env(args: &[&str], spec: &Path, env: &[(&str, &str)]) -> (i32, Value, Output) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cfseq"));
    cmd.args(args).arg("--spec").arg(spec).env_remove("CFSEQ_SEED").env_remove("CFSEQ_OUT_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "stdout must be one status line: {stdout:?}");
    (out.status.code().unwrap(), serde_json::from_str(lines[0]).unwrap(), out)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn simulate_writes_requested_units() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(&tmp.path().join("out"));
    spec["simulation"]["n_units"] = 10.into();
    let path = write_spec(tmp.path(), "spec.json", &spec);
    let (code, status, _) = run(&["simulate"], &path);
    assert_eq!(code, 0);
    assert_eq!(status["status"], "ok");
    let data = tmp.path().join("out/seed0/data");
    let mut ids = BTreeSet::new();
    for split in ["train", "val", "test"] {
        for row in csv_rows(&data.join(format!("{split}.csv"))) {
            ids.insert(row[0].clone());
        }
    }
    assert_eq!(ids.len(), 10);
    assert!(data.join("dataset.json").exists());
    assert!(data.join("bundles_sliding.json").exists());
}

#[test]
fn oracle_evaluation_scores_zero_and_model_scores_finite() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_spec(tmp.path(), "spec.json", &tiny_spec(&tmp.path().join("out")));
    assert_eq!(run(&["train"], &path).0, 0);
    assert_eq!(run(&["evaluate", "--oracle"], &path).0, 0);
    assert_eq!(run(&["evaluate"], &path).0, 0);
    let seed = tmp.path().join("out/seed0");
    let oracle = csv_rows(&seed.join("metrics_oracle.csv"));
    assert_eq!(oracle.len(), 3);
    assert!(oracle.iter().all(|r| r[4].parse::<f64>().unwrap() == 0.0));
    let model = csv_rows(&seed.join("metrics.csv"));
    assert_eq!(model.len(), 3);
    assert!(model.iter().all(|r| r[4].parse::<f64>().unwrap().is_finite()));
    assert!(seed.join("run.jsonl").exists() && seed.join("checkpoint.json").exists());
}

#[test]
fn masking_grid_table_has_one_row_per_strategy() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(&tmp.path().join("out"));
    spec["ablation"] = serde_json::json!({ "methods": ["baseline", "rtm", "rtm_zero", "rtm_interpolation"] });
    let path = write_spec(tmp.path(), "spec.json", &spec);
    let (code, status, _) = run(&["ablate"], &path);
    assert_eq!(code, 0, "{status}");
    let table = tmp.path().join("out/ablate/table3_masking.csv");
    let mut r = csv::Reader::from_path(&table).unwrap();
    let headers = r.headers().unwrap().clone();
    assert_eq!(headers.len(), 3 + 3 * 3 + 1);
    let methods: Vec<String> = r.records().map(|x| x.unwrap()[0].to_string()).collect();
    assert_eq!(methods, ["baseline", "rtm", "rtm_zero", "rtm_interpolation"]);
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
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
fn reruns_and_worker_processes_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(&tmp.path().join("out"));
    spec["seeds"] = serde_json::json!([0, 1]);
    spec["ablation"] = serde_json::json!({ "methods": ["baseline", "sga", "rtm"] });
    let path = write_spec(tmp.path(), "spec.json", &spec);
    let all = |extra: &[&str]| {
        for c in ["simulate", "train", "evaluate", "audit", "diagnose-bound"] {
            assert_eq!(run(&[c], &path).0, 0, "{c}");
        }
        let mut args = vec!["ablate"];
        args.extend_from_slice(extra);
        assert_eq!(run(&args, &path).0, 0);
        assert_eq!(run(&["report"], &path).0, 0);
        tree_bytes(&tmp.path().join("out"))
    };
    let first = all(&[]);
    let second = all(&["--jobs", "3"]);
    assert_eq!(first.iter().map(|f| &f.0).collect::<Vec<_>>(), second.iter().map(|f| &f.0).collect::<Vec<_>>());
    for (a, b) in first.iter().zip(&second) {
        assert!(a.1 == b.1, "{} differs between runs", a.0);
    }
    assert!(!tmp.path().join("out/.ablate-work").exists());
}

#[test]
fn invalid_spec_exits_two_with_field_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(&tmp.path().join("out"));
    spec["seeds"] = serde_json::json!([]);
    spec["train"]["lr"] = (-1.0).into();
    let path = write_spec(tmp.path(), "spec.json", &spec);
    let (code, status, _) = run(&["train"], &path);
    assert_eq!(code, 2);
    let fields: Vec<&str> = status["errors"].as_array().unwrap().iter().map(|e| e["field"].as_str().unwrap()).collect();
    assert_eq!(fields, ["seeds", "train"]);

    spec = tiny_spec(&tmp.path().join("out"));
    spec["train"]["learning_rate"] = 0.1.into();
    let path = write_spec(tmp.path(), "spec2.json", &spec);
    let (code, status, _) = run(&["train"], &path);
    assert_eq!(code, 2);
    assert_eq!(status["errors"][0]["field"], "learning_rate");

    let (code, status, _) = run(&["train"], &tmp.path().join("missing.json"));
    assert_eq!((code, status["kind"].as_str()), (2, Some("invalid_spec")));
}

#[test]
fn runtime_failures_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_spec(tmp.path(), "spec.json", &tiny_spec(&tmp.path().join("out")));
    let (code, status, _) = run(&["evaluate"], &path);
    assert_eq!(code, 1);
    assert_eq!(status["kind"], "io");
    let (code, status, _) = run(&["report"], &path);
    assert_eq!(code, 1);
    assert_eq!(status["status"], "error");
}

#[test]
fn report_refuses_mismatched_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let path = write_spec(tmp.path(), "spec.json", &tiny_spec(&out));
    assert_eq!(run(&["evaluate", "--oracle"], &path).0, 0);
    assert_eq!(run(&["report"], &path).0, 0);
    let mut other = tiny_spec(&out);
    other["train"]["lr"] = 0.02.into();
    let other_path = write_spec(tmp.path(), "other.json", &other);
    let (code, status, _) = run(&["report"], &other_path);
    assert_eq!(code, 1);
    assert_eq!(status["kind"], "contract");
    let (code, status, _) = run(&["evaluate"], &other_path);
    assert_eq!((code, status["kind"].as_str()), (1, Some("io")));
}

#[test]
fn checkpoints_are_bound_to_their_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let path = write_spec(tmp.path(), "spec.json", &tiny_spec(&out));
    assert_eq!(run(&["train"], &path).0, 0);
    let mut other = tiny_spec(&out);
    other["train"]["lr"] = 0.02.into();
    let other_path = write_spec(tmp.path(), "other.json", &other);
    let (code, status, _) = run(&["evaluate"], &other_path);
    assert_eq!((code, status["kind"].as_str()), (1, Some("contract")));
}

#[test]
fn flags_override_environment_which_overrides_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_spec(tmp.path(), "spec.json", &tiny_spec(&tmp.path().join("out")));
    let env_out = tmp.path().join("env_out");
    let env_out_s = env_out.to_str().unwrap();
    let (code, _, _) = run_env(&["simulate"], &path, &[("CFSEQ_SEED", "7"), ("CFSEQ_OUT_DIR", env_out_s)]);
    assert_eq!(code, 0);
    assert!(env_out.join("seed7/data/train.csv").exists());
    let (code, _, _) = run_env(&["simulate", "--seed", "3"], &path, &[("CFSEQ_SEED", "7"), ("CFSEQ_OUT_DIR", env_out_s)]);
    assert_eq!(code, 0);
    assert!(env_out.join("seed3/data/train.csv").exists());
    let (code, status, _) = run_env(&["simulate"], &path, &[("CFSEQ_SEED", "x")]);
    assert_eq!(code, 2);
    assert_eq!(status["errors"][0]["field"], "CFSEQ_SEED");
}

#[test]
fn config_hash_ignores_seeds_and_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_spec(tmp.path(), "a.json", &tiny_spec(&tmp.path().join("a")));
    let mut spec_b = tiny_spec(&tmp.path().join("b"));
    spec_b["seeds"] = serde_json::json!([4]);
    let b = write_spec(tmp.path(), "b.json", &spec_b);
    let (_, sa, _) = run(&["simulate"], &a);
    let (_, sb, _) = run(&["simulate"], &b);
    assert_eq!(sa["config_hash"], sb["config_hash"]);
}
