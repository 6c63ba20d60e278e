use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lpt-seqopt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn json_file(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const CONFIG: &str = r#"{
    // tiny run on the 4^5 table
    "schema_version": 1,
    "oracle": {"kind": "table", "length": 5, "seed": 3},
    "model": {"k_tokens": 2, "k_dim": 2, "prior_hidden": 8, "embed": 8, "ff_hidden": 16, "blocks": 1},
    "offline": {"kind": "random", "n": 80, "below_quantile": 0.5},
    "pretrain": {"mode": "pretrain", "lr_max": 0.001, "lr_min": 0.0001, "batch_size": 16, "epochs": 1},
    "finetune": {"mode": "finetune", "lr_max": 0.001, "lr_min": 0.0001, "batch_size": 16, "epochs": 1},
    "dso": {
        "m_proposals": 16, "capacity": 32, "max_iters": 3, "oracle_budget": 200, "initial_epochs": 1,
        "train": {"mode": "online", "lr_max": 0.0003, "lr_min": 0.000075, "batch_size": 8, "epochs": 1,
                  "weights": {"kind": "top_n", "n": 16}}
    },
    "seeds": [0, 1]
}"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.jsonc");
    std::fs::write(&path, CONFIG).unwrap();
    path.to_str().unwrap().to_string()
}

/// Drops wall-clock times and the output-dependent checkpoint path.
fn untimed(mut report: Value) -> Value {
    report["config"]["checkpoint_dir"] = Value::Null;
    for it in report["iterations"].as_array_mut().unwrap() {
        it["wall_ms"] = Value::from(0);
    }
    report
}

#[test]
fn optimize_writes_run_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("runs");
    let o = run(&["optimize", "--config", &cfg, "--seed", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = out.join("seed-4");
    for f in ["config.json", "run.json", "report.json", "thresholds.csv", "buffer.tsv", "model.ckpt", "eval.json"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    assert!(!out.join("seed-0").exists());

    let echo = json_file(&dir.join("config.json"));
    assert_eq!(echo["seeds"], serde_json::json!([4]));
    assert_eq!(echo["dso"]["oracle_budget"], 200);
    let report = json_file(&dir.join("report.json"));
    assert_eq!(report["seed"], 4);
    assert!(report["queries_used"].as_u64().unwrap() <= 200);
    let th: Vec<f64> = report["threshold_history"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(th.windows(2).all(|w| w[1] >= w[0]));
    let meta = json_file(&dir.join("run.json"));
    assert_eq!(meta["command"], "optimize");

    let ev = run(&["evaluate", "--input", dir.join("report.json").to_str().unwrap()]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let scored: Value = serde_json::from_slice(&ev.stdout).unwrap();
    assert!(scored["top1"].as_f64().unwrap() <= report["best_ever"]["score"].as_f64().unwrap());
    assert!(scored["auc_top10"].is_number());
}

#[test]
fn same_seed_same_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let reports: Vec<Value> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            let o = run(&["optimize", "--config", &cfg, "--seed", "2", "--out", out.to_str().unwrap()]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            untimed(json_file(&out.join("seed-2/report.json")))
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn budget_override_is_respected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("runs");
    let o = run(&["optimize", "--config", &cfg, "--seed", "0", "--budget", "20", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json_file(&out.join("seed-0/report.json"));
    assert!(report["queries_used"].as_u64().unwrap() <= 20);
}

#[test]
fn make_oracle_and_brute_force_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let def = tmp.path().join("oracle.json");
    let table = tmp.path().join("table.tsv");
    let o = run(&[
        "make-oracle",
        "--length",
        "4",
        "--seed",
        "9",
        "--out",
        def.to_str().unwrap(),
        "--table",
        table.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<(String, f64)> = std::fs::read_to_string(&table)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split('\t');
            (parts.next().unwrap().to_string(), parts.next().unwrap().parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 256);
    let (best_seq, best) = rows.iter().cloned().fold((String::new(), f64::NEG_INFINITY), |a, r| if r.1 > a.1 { r } else { a });

    let bf = run(&["brute-force", "--oracle", def.to_str().unwrap()]);
    assert!(bf.status.success());
    let v: Value = serde_json::from_slice(&bf.stdout).unwrap();
    assert_eq!(v["size"], 256);
    assert_eq!(v["max"].as_f64().unwrap(), best);
    assert_eq!(v["argmax"], best_seq.as_str());
}

#[test]
fn errors_are_json_on_stderr() {
    let missing = run(&["optimize", "--config", "/nonexistent/run.json"]);
    assert_eq!(missing.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(err["error"], "io");

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, CONFIG.replace("\"schema_version\": 1", "\"schema_version\": 2")).unwrap();
    let o = run(&["optimize", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("schema_version"));

    let usage = run(&["optimize", "--no-such-flag"]);
    assert_eq!(usage.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&usage.stderr).unwrap();
    assert_eq!(err["error"], "usage");

    assert!(run(&["--help"]).status.success());
}
