use embforge_core::corpus::RecordKind;
use embforge_core::embed::ToyEmbedder;
use embforge_core::fixtures::{generate, FIXTURE_SEED};
use embforge_core::pipeline::{dataset_metas, train_datasets, Record};
use embforge_core::trainer::{evaluate_recall, train, TrainError};
use embforge_core::transform::{transform_records, TransformOptions};
use embforge_core::TrainConfig;
use std::path::Path;

fn fixture_data() -> (
    Vec<embforge_core::trainer::TrainDataset>,
    Vec<embforge_core::trainer::EvalItem>,
) {
    let set = generate(FIXTURE_SEED);
    let mut records = Vec::new();
    for file in &set.raw {
        let out = transform_records(file.kind, &file.records, &TransformOptions::default()).unwrap();
        records.extend(out.samples.into_iter().map(Record::Sample));
        records.extend(out.pairs.into_iter().map(Record::Pair));
    }
    assert!(set.raw.iter().any(|f| f.kind == RecordKind::EntailmentTriple));
    let metas = dataset_metas(&records, Path::new("mixed.jsonl")).unwrap();
    (train_datasets(records, &metas).unwrap(), set.eval)
}

#[test]
fn short_run_beats_the_untrained_model() {
    let (data, eval) = fixture_data();
    let cfg = TrainConfig {
        stage1_steps: 300,
        stage2_steps: 100,
        ..TrainConfig::default()
    };
    let untrained = ToyEmbedder::<f64>::new(cfg.vocab, cfg.dim, cfg.seed).unwrap();
    let before = evaluate_recall(&untrained, &eval).unwrap().at1;
    let (model, report) = train(&cfg, &data, Some(&eval)).unwrap();
    let after = report.recall.unwrap().at1;
    assert!(after > before + 0.1, "recall@1 {before} → {after}");
    assert_eq!(report.stage1.len(), 300);
    assert_eq!(report.stage2.len(), 100);
    // stage one only ever sees retrieval datasets
    let retrieval: Vec<&str> = data
        .iter()
        .filter(|d| d.is_retrieval)
        .map(|d| d.name.as_str())
        .collect();
    assert!(report.stage1.iter().all(|s| retrieval.contains(&s.dataset.as_str())));
    assert!(report.stage2.iter().any(|s| !retrieval.contains(&s.dataset.as_str())));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    model.save(&path).unwrap();
    let loaded = ToyEmbedder::<f64>::load(&path).unwrap();
    assert_eq!(loaded.weights(), model.weights());
    assert_eq!(evaluate_recall(&loaded, &eval).unwrap().at1, after);
}

#[test]
fn same_seed_same_model() {
    let (data, _) = fixture_data();
    let cfg = TrainConfig {
        stage1_steps: 40,
        stage2_steps: 20,
        ..TrainConfig::default()
    };
    let (a, ra) = train(&cfg, &data, None).unwrap();
    let (b, rb) = train(&cfg, &data, None).unwrap();
    assert_eq!(a.weights(), b.weights());
    assert_eq!(ra.stage2, rb.stage2);
}

#[test]
fn eval_items_need_at_least_five_distractors() {
    let (_, mut eval) = fixture_data();
    eval[0].distractors.truncate(4);
    let model = ToyEmbedder::<f64>::new(1 << 10, 8, 0).unwrap();
    assert!(matches!(
        evaluate_recall(&model, &eval),
        Err(TrainError::TooFewDistractors { .. })
    ));
}
