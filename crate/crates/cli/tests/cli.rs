use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qflaw_core::synth;
use serde_json::Value;
use sha2::{Digest, Sha256};

fn qflaw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qflaw"))
        .args(args)
        .env_remove("QFLAW_FEATURE_CACHE")
        .output()
        .expect("spawn qflaw")
}

fn ok(args: &[&str]) -> String {
    let out = qflaw(args);
    assert!(
        out.status.success(),
        "qflaw {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().find(|l| l.starts_with("{\"error\"")).unwrap_or_else(|| panic!("no error JSON in {stderr}"));
    serde_json::from_str(line).unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TABLE: &str = "\
algorithm,selection_mode,B@1,B@2,B@3,B@4,METEOR,ROUGE-L,CIDEr-D,SPICE
AoANet,full training set,63.3,44.3,29.9,19.7,18.0,44.4,43.6,11.2
AoANet,perfect flag,63.3,43.8,29.5,19.9,18.1,44.2,43.6,11.5
AoANet,predicted flag,63.2,44.0,29.5,19.8,18.1,44.2,42.9,11.5
AoANet,random sample,62.5,43.3,28.8,18.9,18.0,44.1,41.9,11.4
";

const TINY: &str = "\
seed = 5
[data]
annotations = \"annotations.json\"
questions = \"questions.json\"
[recognizability.train]
epochs = 15
hidden = [16]
";

fn corpus(dir: &Path, n: usize) -> PathBuf {
    let root = dir.join("corpus");
    synth::annotated_corpus(n, 32, 4).write(&root).unwrap();
    std::fs::write(root.join("qflaw.toml"), TINY).unwrap();
    root
}

fn tree_digest(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}

#[test]
fn cost_report_for_reconstructed_count() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&["cost", "--n-unrecognizable", "5802", "--out", s(tmp.path())]);
    assert!(stdout.contains("$3829.32"), "{stdout}");
    assert!(stdout.contains("378.7 hours"), "{stdout}");
    let report = read_json(&tmp.path().join("cost.json"));
    assert_eq!(report["n_unrecognizable"], 5802);
    assert_eq!(report["run"]["tool"], "qflaw");
    let run = read_json(&tmp.path().join("cost.run.json"));
    assert_eq!(run["command"], "cost");
    assert!(run["artifacts"]["cost.txt"].is_string());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = qflaw(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");
}

#[test]
fn missing_input_is_reported_as_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qflaw(&["aggregate", "--annotations", s(&tmp.path().join("nope.json")), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert!(err["error"]["message"].as_str().unwrap().contains("nope.json"));
}

#[test]
fn stats_and_filter_leave_inputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let root = corpus(tmp.path(), 60);
    let before = tree_digest(&root);
    let out = tmp.path().join("out");
    let cfg = root.join("qflaw.toml");
    ok(&["stats", "--config", s(&cfg), "--out", s(&out)]);
    ok(&["filter", "--config", s(&cfg), "--out", s(&out), "--n", "20"]);
    assert_eq!(before, tree_digest(&root));

    let stats = read_json(&out.join("stats.json"));
    assert!(stats["run"]["config_hash"].as_str().unwrap().len() == 16);
    assert!(out.join("interrelation.csv").exists());
    assert!(out.join("unanswerable_given_label.svg").exists());
    for mode in ["full", "perfect_flag", "random_sample"] {
        let m = read_json(&out.join(format!("manifests/{mode}.json")));
        assert_eq!(m["selection_mode"], mode);
    }
    assert_eq!(read_json(&out.join("manifests/random_sample.json"))["N"], 20);
}

#[test]
fn train_predict_filter_with_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let root = corpus(tmp.path(), 80);
    let out = tmp.path().join("out");
    let cfg = root.join("qflaw.toml");
    ok(&["train-rec", "--config", s(&cfg), "--out", s(&out)]);
    let ck = out.join("recognizability.ckpt.json");
    assert!(ck.exists());
    let eval = read_json(&out.join("recognizability.eval.json"));
    for key in ["model", "random_guess", "hog_svm", "sift_svm"] {
        assert!(eval.get(key).is_some(), "missing {key} in {eval}");
    }

    ok(&["predict", "--config", s(&cfg), "--out", s(&out), "--checkpoint", s(&ck)]);
    let preds = std::fs::read_to_string(out.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 80);
    for line in preds.lines() {
        let row: Value = serde_json::from_str(line).unwrap();
        let p = row["probability"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    ok(&["filter", "--config", s(&cfg), "--out", s(&out), "--checkpoint", s(&ck)]);
    let predicted = read_json(&out.join("manifests/predicted_flag.json"));
    let n = predicted["N"].as_u64().unwrap();
    assert_eq!(read_json(&out.join("manifests/perfect_flag.json"))["N"].as_u64().unwrap(), n);
    assert_eq!(read_json(&out.join("manifests/random_sample.json"))["N"].as_u64().unwrap(), n);

    // same threshold applied to the predictions file gives the same subset
    let out2 = tmp.path().join("out2");
    ok(&["filter", "--config", s(&cfg), "--out", s(&out2), "--predictions", s(&out.join("predictions.jsonl"))]);
    let from_preds = read_json(&out2.join("manifests/predicted_flag.json"));
    assert_eq!(from_preds["image_ids"], predicted["image_ids"]);
}

#[test]
fn report_tabulates_and_reports_missing_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let root = corpus(tmp.path(), 40);
    let out = tmp.path().join("out");
    let cfg = root.join("qflaw.toml");
    ok(&["filter", "--config", s(&cfg), "--out", s(&out), "--n", "10"]);
    let manifests = out.join("manifests");
    // stand in for a checkpoint-filtered manifest
    let mut predicted = read_json(&manifests.join("perfect_flag.json"));
    predicted["selection_mode"] = "predicted_flag".into();
    std::fs::write(manifests.join("predicted_flag.json"), predicted.to_string()).unwrap();
    let results = tmp.path().join("results.csv");
    std::fs::write(&results, TABLE).unwrap();
    let stdout = ok(&["report", "--config", s(&cfg), "--out", s(&out), "--results", s(&results)]);
    assert!(stdout.contains("CIDEr-D"), "{stdout}");
    let report = read_json(&out.join("comparison.json"));
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);

    let partial: String = TABLE.lines().filter(|l| !l.contains("random")).map(|l| format!("{l}\n")).collect();
    std::fs::write(&results, partial).unwrap();
    let res = qflaw(&["report", "--config", s(&cfg), "--out", s(&out), "--results", s(&results)]);
    assert_eq!(res.status.code(), Some(1));
    let err = error_json(&res);
    assert_eq!(err["error"]["kind"], "join");
    assert!(err["error"]["message"].as_str().unwrap().contains("random_sample"));
}
