use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn unimatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unimatch"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_json(path: &Path, v: &Value) -> String {
    std::fs::write(path, v.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn tiny_generator() -> Value {
    json!({
        "class_counts": [60, 12, 6, 10],
        "users": 60,
        "records_per_domain": [80, 70, 90, 120],
        "shards": 4
    })
}

fn tiny_run() -> Value {
    json!({
        "model": {
            "embed_dim": 8, "user_buckets": 64, "entity_buckets": 128, "feature_buckets": 64,
            "max_seq_len": 6, "ffn_dim": 8, "ad_hidden": [8], "expert_layers": [16, 8],
            "tower_hidden": [8], "classifier_hidden": 8, "projection_dim": 6, "critic_hidden": [6]
        },
        "train": { "epochs": 1, "max_steps": 3, "batch_size": 16, "negatives": 3 },
        "eval": { "ns": [5, 10], "users_per_domain": 10 }
    })
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let gen = write_json(&dir.path().join("gen.json"), &tiny_generator());
    let run = write_json(&dir.path().join("run.json"), &tiny_run());

    let report: Value = serde_json::from_str(&ok(&unimatch(&["gen-data", "--config", &gen, "--out", &d("data")]))).unwrap();
    assert!(report.get("train_per_domain").is_some());

    ok(&unimatch(&["train", "--config", &run, "--data", &d("data"), "--out", &d("run")]));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,epoch,l_ce,l_s,l_d,l_wd,l_ortho,w_s,w_d,w_wd,w_ortho"));
    assert_eq!(metrics.lines().count(), 4);

    ok(&unimatch(&["build-index", "--data", &d("data"), "--checkpoint", &d("run"), "--out", &d("index.bin")]));
    let eval_cfg = write_json(&dir.path().join("eval.json"), &tiny_run()["eval"]);
    ok(&unimatch(&[
        "eval", "--data", &d("data"), "--checkpoint", &d("run"), "--config", &eval_cfg,
        "--index", &d("index.bin"), "--out", &d("sweep.csv"), "--report", &d("report.json"),
    ]));
    let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("n,recall_all_d0"));
    assert!(sweep.lines().next().unwrap().contains("recall_retrieval_avg"));
    assert_eq!(sweep.lines().count(), 3);

    let test = std::fs::read_to_string(dir.path().join("data/test.jsonl")).unwrap();
    let record: Value = serde_json::from_str(test.lines().next().unwrap()).unwrap();
    let user = json!({ "user_id": record["user_id"], "profile": record["profile"], "sequence": record["sequence"] });
    let user_path = write_json(&dir.path().join("user.json"), &user);
    let args = [
        "retrieve", "--data", &d("data"), "--checkpoint", &d("run/checkpoint.bin"), "--index", &d("index.bin"),
        "--domain", "1", "--topk", "7",
    ];
    let a = ok(&unimatch(&[&args[..], &["--user", &format!("@{user_path}")]].concat()));
    let b = ok(&unimatch(&[&args[..], &["--user", &user.to_string()]].concat()));
    assert_eq!(a, b);
    let result: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(result["ids"].as_array().unwrap().len(), 7);

    let out = ok(&unimatch(&["dump-repr", "--data", &d("data"), "--checkpoint", &d("run"), "--sample", "20", "--out", &d("repr.csv")]));
    assert!(out.contains("rows written"));
    assert!(std::fs::read_to_string(dir.path().join("repr.csv")).unwrap().starts_with("view,row,domain,v0"));
}

#[test]
fn ablate_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let gen = write_json(&dir.path().join("gen.json"), &tiny_generator());
    let run = write_json(&dir.path().join("run.json"), &tiny_run());
    ok(&unimatch(&["gen-data", "--config", &gen, "--out", &d("data")]));
    ok(&unimatch(&["ablate", "--data", &d("data"), "--config", &run, "--seeds", "0", "--out", &d("ablation.csv")]));
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let missing = unimatch(&["train", "--config", &d("nope.json"), "--data", &d("data"), "--out", &d("run")]);
    assert_eq!(missing.status.code(), Some(2));

    let bad = write_json(&dir.path().join("bad.json"), &json!({ "class_counts": [0, 1, 1, 1] }));
    assert_eq!(unimatch(&["gen-data", "--config", &bad, "--out", &d("data")]).status.code(), Some(2));

    let unknown = write_json(&dir.path().join("unknown.json"), &json!({ "trian": {} }));
    let gen = write_json(&dir.path().join("gen.json"), &tiny_generator());
    ok(&unimatch(&["gen-data", "--config", &gen, "--out", &d("data")]));
    let out = unimatch(&["train", "--config", &unknown, "--data", &d("data"), "--out", &d("run")]);
    assert_eq!(out.status.code(), Some(2));

    let no_data = unimatch(&["eval", "--data", &d("missing"), "--checkpoint", &d("x"), "--out", &d("o.csv")]);
    assert_eq!(no_data.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three_and_keeps_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let gen = write_json(&dir.path().join("gen.json"), &tiny_generator());
    ok(&unimatch(&["gen-data", "--config", &gen, "--out", &d("data")]));
    let mut run = tiny_run();
    run["train"]["learning_rate"] = json!(1e300);
    run["train"]["max_steps"] = json!(20);
    let cfg = write_json(&dir.path().join("run.json"), &run);
    let out = unimatch(&["train", "--config", &cfg, "--data", &d("data"), "--out", &d("run")]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/checkpoint.bin").exists());
}
