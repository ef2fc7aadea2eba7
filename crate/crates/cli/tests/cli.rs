use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn threem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_threem")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = threem(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn prepare(dir: &Path) -> String {
    let data = dir.join("data");
    ok(&["prepare", "--out", data.to_str().unwrap(), "--seed", "7"]);
    data.to_str().unwrap().to_string()
}

const TINY: &[&str] = &[
    "--d-att", "16", "--d-ff", "32", "--heads", "2", "--num-blocks", "3", "--emb-blocks", "1", "--d-emb", "16",
    "--dec-blocks", "1", "--dec-d-ff", "32", "--dec-heads", "2", "--subsample-channels", "4", "--num-experts", "4",
    "--moe-every", "1",
];

#[test]
fn prepare_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (da, db) = (prepare(a.path()), prepare(b.path()));
    let (da, db) = (Path::new(&da), Path::new(&db));
    assert_eq!(jsonl(&da.join("train.jsonl")).len(), 45);
    assert_eq!(jsonl(&da.join("dev.jsonl")).len(), 5);
    for f in ["train.jsonl", "dev.jsonl", "cmvn.json"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }
    for entry in fs::read_dir(da.join("feats")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(da.join("feats").join(&name)).unwrap(), fs::read(db.join("feats").join(&name)).unwrap());
    }
    let cfg: Value = serde_json::from_str(&fs::read_to_string(da.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["command"], "prepare");
    assert_eq!(cfg["config"]["seed"], 7);
}

#[test]
fn flops_report_is_flat_in_expert_count() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("flops");
    let table = ok(&["flops", "--full-scale", "--experts", "16,64", "--run", run.to_str().unwrap()]);
    assert_eq!(table.lines().count(), 4);
    let report: Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let rows = report.as_array().unwrap();
    assert_eq!(rows[0]["report"]["flops"], rows[1]["report"]["flops"]);
    assert!(rows[1]["report"]["params"].as_u64() > rows[0]["report"]["params"].as_u64());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"model": {"num_experts": 8, "d_att": 32}}"#).unwrap();
    let run = dir.path().join("flops");
    let args = ["flops", "--config", cfg.to_str().unwrap(), "--num-experts", "2", "--run", run.to_str().unwrap()];
    ok(&args);
    let snap: Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["config"]["model"]["num_experts"], 2);
    assert_eq!(snap["config"]["model"]["d_att"], 32);
}

#[test]
fn ctc_only_weighting_ignores_attention_losses() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(dir.path());
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", &data, "--run", run.to_str().unwrap()];
    args.extend(TINY);
    args.extend(["--eta", "1.0", "--max-steps", "6", "--eval-every", "3", "--alpha", "0", "--beta", "0", "--gamma", "0"]);
    ok(&args);
    let metrics = jsonl(&run.join("metrics.jsonl"));
    assert_eq!(metrics.len(), 6);
    for m in &metrics {
        let (loss, ctc) = (m["loss"].as_f64().unwrap(), m["l_ctc"].as_f64().unwrap());
        assert!(m["l_aed_sum"].as_f64().unwrap() > 0.0);
        assert_eq!(loss, ctc);
    }
    assert!(run.join("checkpoints/final.ckpt").exists());
    let snap: Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["command"], "train");
    assert_eq!(snap["config"]["train"]["eta"], 1.0);
    assert_eq!(snap["config"]["model"]["d_att"], 16);
}

#[test]
fn pretrain_train_decode_score() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(dir.path());
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let (pre, joint, dec) = (p("pre"), p("joint"), p("dec"));
    let mut args = vec!["pretrain-embedding", "--data", &data, "--run", &pre];
    args.extend(TINY);
    args.extend(["--max-steps", "4", "--eval-every", "2"]);
    ok(&args);
    let emb = format!("{pre}/checkpoints/final.ckpt");

    let mut args = vec!["train", "--data", &data, "--run", &joint, "--embedding", &emb];
    args.extend(TINY);
    args.extend(["--max-steps", "4", "--eval-every", "2"]);
    ok(&args);

    let ckpt = format!("{joint}/checkpoints/final.ckpt");
    ok(&["decode", "--data", &data, "--checkpoint", &ckpt, "--run", &dec, "--beam", "4", "--nbest", "3"]);
    let lines = jsonl(Path::new(&dec).join("nbest.jsonl").as_path());
    assert_eq!(lines.len(), 5);
    for l in &lines {
        let nbest = l["nbest"].as_array().unwrap();
        assert!(!nbest.is_empty() && nbest.len() <= 3);
        assert!(nbest.iter().any(|h| h["tokens"] == l["tokens"]));
    }

    let out = ok(&["score", "--data", &data, "--run", &dec]);
    let report: Value = serde_json::from_str(&fs::read_to_string(Path::new(&dec).join("report.json")).unwrap()).unwrap();
    let cer = report["cer"].as_f64().unwrap();
    assert!(out.contains(&format!("CER {cer:.4}")));
    assert_eq!(report["utterances"].as_array().unwrap().len(), 5);
    assert!(Path::new(&dec).join("config.json").exists());
    assert!(Path::new(&dec).join("config.score.json").exists());
}

#[test]
fn runtime_errors_are_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = threem(&["decode", "--data", "nowhere", "--checkpoint", missing.to_str().unwrap(), "--run", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    let err: Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("missing.ckpt"));

    let data = prepare(dir.path());
    let out = threem(&["train", "--data", &data, "--run", "r", "--eta", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(err["error"], "invalid_argument");
}

#[test]
fn unknown_flags_are_rejected_with_usage() {
    let out = threem(&["flops", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}
