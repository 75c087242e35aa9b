use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn embforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embforge"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = embforge(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn fixtures(dir: &Path) {
    ok(&["fixtures", "--out", p(dir)]);
}

#[test]
fn transform_writes_samples_and_pairs() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let out = dir.path().join("wiki.jsonl");
    let instructions = dir.path().join("instructions.json");
    ok(&[
        "transform",
        "--kind",
        "title_body",
        "--in",
        p(&dir.path().join("raw/wiki-titles.jsonl")),
        "--out",
        p(&out),
        "--instructions",
        p(&instructions),
    ]);
    let samples = lines(&out);
    assert_eq!(samples.len(), 500);
    assert!(samples
        .iter()
        .all(|s| s["task"] == "retrieval" && !s["instruction"].as_str().unwrap().is_empty()));

    let pairs = dir.path().join("nli.jsonl");
    ok(&[
        "transform",
        "--kind",
        "entailment-triple",
        "--in",
        p(&dir.path().join("raw/nli-pairs.jsonl")),
        "--out",
        p(&pairs),
    ]);
    let pairs = lines(&pairs);
    assert_eq!(pairs.len(), 500);
    assert!(pairs[0].get("score").is_some());

    let bad = embforge(&["transform", "--kind", "poem", "--in", p(&out), "--out", p(&out)]);
    assert!(!bad.status.success());
}

#[test]
fn eval_loss_reports_value_and_gradient_check() {
    let dir = tempfile::tempdir().unwrap();
    let batch = dir.path().join("batch.json");
    // unnormalised on purpose: the command normalises raw vectors
    fs::write(
        &batch,
        json!({
            "queries": [[2.0, 0.0], [0.0, 3.0]],
            "positives": [[1.6, 1.2], [0.1, 1.0]],
            "negatives": [[[1.0, 1.0]], [[-1.0, 0.2]]],
            "class_labels": ["x", "y"],
            "neg_class_labels": [["y"], ["x"]]
        })
        .to_string(),
    )
    .unwrap();
    for kind in ["retrieval", "cls"] {
        let report: Value = serde_json::from_str(&ok(&[
            "eval-loss",
            "--kind",
            kind,
            "--batch",
            p(&batch),
            "--tau",
            "0.05",
            "--gradcheck",
        ]))
        .unwrap();
        assert!(report["loss"].as_f64().unwrap() > 0.0);
        assert!(
            report["gradcheck"]["max_rel_error"].as_f64().unwrap() < 1e-5,
            "{report}"
        );
    }

    let pairs = dir.path().join("pairs.json");
    fs::write(
        &pairs,
        json!({"a": [[1.0, 0.0], [1.0, 0.0]], "b": [[0.9, 0.19f64.sqrt()], [0.3, 0.91f64.sqrt()]], "scores": [1, 0]})
            .to_string(),
    )
    .unwrap();
    let report: Value = serde_json::from_str(&ok(&[
        "eval-loss",
        "--kind",
        "cosent",
        "--batch",
        p(&pairs),
        "--tau",
        "1",
    ]))
    .unwrap();
    assert!((report["loss"].as_f64().unwrap() - 0.437_487_950_485_885_6).abs() < 1e-9);
}

#[test]
fn plan_follows_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("datasets.json");
    fs::write(
        &manifest,
        json!([
            {"name": "a", "size": 100, "is_retrieval": true, "loss": "infonce", "path": "a.jsonl"},
            {"name": "b", "size": 100, "is_retrieval": false, "loss": "cosent", "path": "b.jsonl"}
        ])
        .to_string(),
    )
    .unwrap();
    let out = dir.path().join("plan.json");
    ok(&[
        "plan",
        "--stage",
        "2",
        "--alpha",
        "1",
        "--eta",
        "0.72",
        "--manifest",
        p(&manifest),
        "--out",
        p(&out),
    ]);
    let plan: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let ratios: Vec<f64> = plan["datasets"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["ratio"].as_f64().unwrap())
        .collect();
    assert!((ratios[0] - 0.72).abs() < 1e-12 && (ratios[1] - 0.28).abs() < 1e-12);

    ok(&["plan", "--stage", "1", "--manifest", p(&manifest), "--out", p(&out)]);
    let plan: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(plan["datasets"].as_array().unwrap().len(), 1);

    assert!(
        !embforge(&["plan", "--stage", "3", "--manifest", p(&manifest), "--out", p(&out)])
            .status
            .success()
    );
}

#[test]
fn data_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let d = |name: &str| dir.path().join(name);
    ok(&[
        "transform",
        "--kind",
        "title_body",
        "--in",
        p(&d("raw/wiki-titles.jsonl")),
        "--out",
        p(&d("s.jsonl")),
    ]);

    let needs_backend = embforge(&[
        "synthesize",
        "--mode",
        "hardneg",
        "--in",
        p(&d("s.jsonl")),
        "--out",
        p(&d("x.jsonl")),
    ]);
    assert!(!needs_backend.status.success());

    ok(&[
        "synthesize",
        "--mode",
        "hardneg",
        "--stub",
        "--n",
        "2",
        "--in",
        p(&d("s.jsonl")),
        "--out",
        p(&d("h.jsonl")),
        "--audit",
        p(&d("audit.jsonl")),
    ]);
    let hard = lines(&d("h.jsonl"));
    assert!(hard.iter().all(|s| s["negs"].as_array().unwrap().len() == 2));
    assert_eq!(lines(&d("audit.jsonl")).len(), 1000);

    ok(&[
        "synthesize",
        "--mode",
        "paraphrase",
        "--stub",
        "--in",
        p(&d("s.jsonl")),
        "--out",
        p(&d("para.jsonl")),
    ]);
    assert_eq!(lines(&d("para.jsonl")).len(), 1000);

    let corpus: Vec<String> = lines(&d("s.jsonl"))
        .iter()
        .map(|s| s["pos"].as_str().unwrap().to_string())
        .collect();
    fs::write(d("corpus.txt"), corpus.join("\n")).unwrap();
    ok(&[
        "mine",
        "--in",
        p(&d("s.jsonl")),
        "--corpus",
        p(&d("corpus.txt")),
        "--out",
        p(&d("m.jsonl")),
        "--negs",
        "3",
    ]);
    assert!(lines(&d("m.jsonl"))
        .iter()
        .all(|s| s["negs"].as_array().unwrap().len() == 3));

    ok(&["dedup", "--in", p(&d("para.jsonl")), "--out", p(&d("dd.jsonl"))]);
    assert_eq!(lines(&d("dd.jsonl")).len(), 1000);
    let out = ok(&[
        "filter",
        "--in",
        p(&d("dd.jsonl")),
        "--out",
        p(&d("f.jsonl")),
        "--threshold",
        "0.3",
    ]);
    assert!(out.starts_with("filter: kept"));
}

#[test]
fn run_resumes_and_names_failing_stages() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let config = dir.path().join("pipeline.json");
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    cfg["stages"] = json!(["transform", "synthesize", "mine", "dedup", "filter", "plan"]);
    fs::write(&config, cfg.to_string()).unwrap();

    let first = embforge(&["run", "--config", p(&config), "--stub"]);
    assert!(first.status.success());
    let events: Vec<Value> = String::from_utf8(first.stderr)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("stderr carries JSON events"))
        .collect();
    assert!(events
        .iter()
        .any(|e| e["event"] == "stage_finished" && e["stage"] == "plan"));

    let again = ok(&["run", "--config", p(&config)]);
    assert_eq!(again.matches("up to date").count(), 6, "{again}");

    // train from the plan stage's manifest
    let small = dir.path().join("train.json");
    fs::write(&small, json!({"stage1_steps": 30, "stage2_steps": 10}).to_string()).unwrap();
    let report = dir.path().join("report.json");
    ok(&[
        "train",
        "--manifest",
        p(&dir.path().join("work/plan/datasets.json")),
        "--config",
        p(&small),
        "--report",
        p(&report),
        "--checkpoint",
        p(&dir.path().join("model.bin")),
        "--eval",
        p(&dir.path().join("eval.jsonl")),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report["stage1"].as_array().unwrap().len(), 30);
    assert!(report["recall"]["at1"].as_f64().is_some());

    fs::remove_file(dir.path().join("raw/zh-qa.jsonl")).unwrap();
    let failed = embforge(&["run", "--config", p(&config)]);
    assert!(!failed.status.success());
    let stderr = String::from_utf8(failed.stderr).unwrap();
    assert!(stderr.contains("stage transform failed"), "{stderr}");
    assert!(dir.path().join("work/plan/datasets.json").is_file());
}

#[test]
fn bundled_fixtures_are_current() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    for name in [
        "raw/wiki-titles.jsonl",
        "raw/fact-check.jsonl",
        "raw/zh-qa.jsonl",
        "raw/nli-pairs.jsonl",
        "raw/reviews.jsonl",
        "instructions.json",
        "eval.jsonl",
        "pipeline.json",
    ] {
        assert!(
            fs::read(dir.path().join(name)).unwrap() == fs::read(bundled.join(name)).unwrap(),
            "fixtures/{name} is stale; regenerate with `embforge fixtures --out fixtures`"
        );
    }
}
