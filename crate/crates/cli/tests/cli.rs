use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SPEC: &str = r#"{"num_classes": 3, "train": 48, "val": 24, "test_id": 24, "test_ood": 24,
    "lexicon": {"agents": 4, "verbs": 4, "patients": 4}, "ood_kind": "role-swap"}"#;
const CONFIG: &str = r#"{"encoder": {"d_model": 16, "heads": 4, "backbone_layers": 1, "head_layers": 1, "num_classes": 3},
    "epochs": 2, "batch_size": 8, "lr": 0.001}"#;

fn srlood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srlood")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = srlood(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("spec.json"), SPEC).unwrap();
    fs::write(root.join("cfg.json"), CONFIG).unwrap();
    let data = root.join("data");
    let ckpt = root.join("ckpt");

    ok(&["gen-data", "--spec", p(&root.join("spec.json")), "--out", p(&data), "--seed", "4"]);
    ok(&["gen-data", "--spec", p(&root.join("spec.json")), "--out", p(&root.join("again")), "--seed", "4"]);
    for f in ["train.jsonl", "val.jsonl", "test_id.jsonl", "test_ood.jsonl", "lexicon.json", "spec.json"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(root.join("again").join(f)).unwrap(), "{f}");
    }

    let out = ok(&["train", "--config", p(&root.join("cfg.json")), "--data", p(&data), "--out", p(&ckpt), "--seed", "4"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("val accuracy"));
    for f in ["checkpoint.json", "detector.json", "train_log.json"] {
        assert!(ckpt.join(f).exists(), "{f}");
    }
    let rerun = root.join("ckpt2");
    ok(&["train", "--config", p(&root.join("cfg.json")), "--data", p(&data), "--out", p(&rerun), "--seed", "4"]);
    assert_eq!(fs::read(ckpt.join("checkpoint.json")).unwrap(), fs::read(rerun.join("checkpoint.json")).unwrap());

    let ood = format!("swap={}", p(&data.join("test_ood.jsonl")));
    let report = root.join("report.json");
    let out = ok(&["eval", "--ckpt", p(&ckpt), "--id", p(&data.join("test_id.jsonl")), "--ood", &ood, "--report", p(&report)]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 4);
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["id_dataset"], "test_id");
    assert_eq!(rep["seed"], 4);
    for s in ["msp", "energy", "maha", "cosine"] {
        let auroc = rep["ood_sets"]["swap"][s]["auroc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&auroc));
    }

    let dump = root.join("val_emb.jsonl");
    ok(&["export-emb", "--ckpt", p(&ckpt), "--data", p(&data.join("val.jsonl")), "--out", p(&dump)]);
    let from_dump = root.join("report_dump.json");
    ok(&[
        "eval", "--ckpt", p(&ckpt), "--id", p(&data.join("test_id.jsonl")), "--ood", &ood, "--report", p(&from_dump),
        "--fit-dump", p(&dump),
    ]);
    let a: serde_json::Value = serde_json::from_str(&fs::read_to_string(&from_dump).unwrap()).unwrap();
    for s in ["msp", "energy", "maha", "cosine"] {
        assert_eq!(a["ood_sets"]["swap"][s], rep["ood_sets"]["swap"][s], "{s}");
    }

    let ood_dump = root.join("ood_emb.jsonl");
    ok(&["export-emb", "--ckpt", p(&ckpt), "--data", p(&data.join("test_ood.jsonl")), "--out", p(&ood_dump)]);
    let scores = root.join("scores.csv");
    ok(&["score", "--detector", p(&ckpt.join("detector.json")), "--embeddings", p(&ood_dump), "--out", p(&scores)]);
    let mut reader = csv::Reader::from_path(&scores).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["id", "label", "msp", "energy", "maha", "cosine"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 24);
    assert!(rows.iter().all(|r| &r[1] == "-1" && r[4].parse::<f64>().unwrap() >= 0.0));

    let sweep = root.join("sweep.csv");
    ok(&["sweep-mask", "--config", p(&root.join("cfg.json")), "--data", p(&data), "--ps", "0,0.3", "--out", p(&sweep), "--seed", "4"]);
    let table = fs::read_to_string(&sweep).unwrap();
    assert_eq!(table.lines().count(), 3);
    let max_ssl: f64 = table.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(max_ssl, 0.0, "{table}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(srlood(&["--help"]).status.code(), Some(0));
    assert_eq!(srlood(&["train"]).status.code(), Some(1));
    assert_eq!(srlood(&["eval", "--ckpt", "x", "--id", "y", "--ood", "noequals", "--report", "r"]).status.code(), Some(1));
    let missing = srlood(&["train", "--data", p(&root.join("nope")), "--out", p(&root.join("o"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    fs::write(root.join("spec.json"), r#"{"lexicon": {"agents": 1, "verbs": 1, "patients": 1}}"#).unwrap();
    let small = srlood(&["gen-data", "--spec", p(&root.join("spec.json")), "--out", p(&root.join("d"))]);
    assert_eq!(small.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&small.stderr).contains("lexicon too small"));

    fs::write(root.join("spec.json"), SPEC).unwrap();
    ok(&["gen-data", "--spec", p(&root.join("spec.json")), "--out", p(&root.join("data"))]);
    let exploding = CONFIG.replace("\"lr\": 0.001", "\"lr\": 1e300");
    fs::write(root.join("cfg.json"), exploding).unwrap();
    let out = srlood(&["train", "--config", p(&root.join("cfg.json")), "--data", p(&root.join("data")), "--out", p(&root.join("c"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
