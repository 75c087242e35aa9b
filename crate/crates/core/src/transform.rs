//! Conversion of heterogeneous raw records into training samples (retrieval
//! and classification) or scored pairs (NLI).

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{CorpusError, Provenance, RawRecord, RecordKind, ScoredPair, TaskKind, TrainingSample};

/// Default passage cap, in characters.
pub const DEFAULT_MAX_CHARS: usize = 1536;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("expected a {expected:?} record, got {found:?}")]
    WrongKind { expected: RecordKind, found: RecordKind },
    #[error("field `{0}` is missing or blank")]
    EmptyField(&'static str),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("numeric label `{0}` needs a binarize threshold")]
    MissingThreshold(String),
    #[error("classification data needs at least 2 labels, found {0}")]
    InsufficientLabels(usize),
    #[error("multi-turn question-answer records are not supported")]
    MultiTurn,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

fn expect_kind(record: &RawRecord, expected: RecordKind) -> Result<(), TransformError> {
    if record.kind != expected {
        return Err(TransformError::WrongKind {
            expected,
            found: record.kind,
        });
    }
    Ok(())
}

fn required<'a>(record: &'a RawRecord, field: &'static str) -> Result<&'a str, TransformError> {
    match record.field(field) {
        Some(v) if !v.trim().is_empty() => Ok(v),
        _ => Err(TransformError::EmptyField(field)),
    }
}

/// Prefix of `text` holding at most `max_chars` characters.
pub fn truncate_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((byte, _)) => &text[..byte],
        None => text,
    }
}

pub fn transform_title_body(record: &RawRecord, max_chars: usize) -> Result<TrainingSample, TransformError> {
    expect_kind(record, RecordKind::TitleBody)?;
    let title = required(record, "title")?;
    let body = required(record, "body")?;
    let positive = truncate_chars(body, max_chars);
    if positive.trim().is_empty() {
        return Err(TransformError::EmptyField("body"));
    }
    Ok(TrainingSample::retrieval(&record.dataset, title, positive))
}

/// One claim/evidence record after label mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClaimEvidence {
    pub dataset: String,
    pub claim: String,
    pub evidence: String,
    pub supports: bool,
}

pub fn transform_claim_evidence(record: &RawRecord) -> Result<ClaimEvidence, TransformError> {
    expect_kind(record, RecordKind::ClaimEvidence)?;
    let claim = required(record, "claim")?;
    let evidence = required(record, "evidence")?;
    let label = required(record, "evidence_label")?;
    let supports = match label.trim().to_lowercase().as_str() {
        "supports" => true,
        "refutes" => false,
        _ => return Err(TransformError::UnknownLabel(label.to_string())),
    };
    Ok(ClaimEvidence {
        dataset: record.dataset.clone(),
        claim: claim.to_string(),
        evidence: evidence.to_string(),
        supports,
    })
}

/// Group claim/evidence items by exact claim string (first-seen order). Each
/// supporting evidence becomes one sample carrying every refuting evidence of
/// that claim as negatives; claims without supporting evidence are dropped.
pub fn merge_claim_evidence(items: &[ClaimEvidence]) -> Vec<TrainingSample> {
    let mut order: Vec<(&str, &str)> = Vec::new();
    let mut groups: BTreeMap<(&str, &str), (Vec<&str>, Vec<&str>)> = BTreeMap::new();
    for item in items {
        let key = (item.dataset.as_str(), item.claim.as_str());
        let entry = groups.entry(key).or_insert_with(|| {
            order.push(key);
            (Vec::new(), Vec::new())
        });
        if item.supports {
            entry.0.push(&item.evidence);
        } else {
            entry.1.push(&item.evidence);
        }
    }
    let mut out = Vec::new();
    for key in order {
        let (supports, refutes) = &groups[&key];
        for pos in supports {
            let mut sample = TrainingSample::retrieval(key.0, key.1, *pos);
            sample.negatives = refutes
                .iter()
                .filter(|neg| *neg != pos)
                .map(|s| s.to_string())
                .collect();
            out.push(sample);
        }
    }
    out
}

fn looks_multi_turn(text: &str) -> bool {
    let trimmed = text.trim_start();
    trimmed.starts_with('[')
        && matches!(
            serde_json::from_str::<serde_json::Value>(trimmed),
            Ok(serde_json::Value::Array(_))
        )
}

pub fn transform_qa(record: &RawRecord) -> Result<TrainingSample, TransformError> {
    expect_kind(record, RecordKind::QuestionAnswer)?;
    if record.payload.contains_key("turns") || record.payload.contains_key("history") {
        return Err(TransformError::MultiTurn);
    }
    let question = required(record, "question")?;
    let answer = required(record, "answer")?;
    if looks_multi_turn(question) || looks_multi_turn(answer) {
        return Err(TransformError::MultiTurn);
    }
    Ok(TrainingSample::retrieval(&record.dataset, question, answer))
}

fn symmetric_pairs(record: &RawRecord, a: &str, b: &str, score: u8) -> Vec<ScoredPair> {
    vec![
        ScoredPair::new(&record.dataset, a, b, score),
        ScoredPair::new(&record.dataset, b, a, score),
    ]
}

/// Binary or thresholded STS label to a 0/1 score, emitted in both orders.
pub fn transform_sts(record: &RawRecord, binarize_threshold: Option<f64>) -> Result<Vec<ScoredPair>, TransformError> {
    expect_kind(record, RecordKind::StsPair)?;
    let a = required(record, "sentence_a")?;
    let b = required(record, "sentence_b")?;
    let label = required(record, "label")?;
    let score = match label.trim().to_lowercase().as_str() {
        "yes" | "true" => 1,
        "no" | "false" => 0,
        other => {
            let value: f64 = other
                .parse()
                .map_err(|_| TransformError::UnknownLabel(label.to_string()))?;
            if !value.is_finite() {
                return Err(TransformError::UnknownLabel(label.to_string()));
            }
            let threshold = binarize_threshold.ok_or_else(|| TransformError::MissingThreshold(label.into()))?;
            u8::from(value >= threshold)
        }
    };
    Ok(symmetric_pairs(record, a, b, score))
}

/// entailment / neutral / contradiction to 2 / 1 / 0, emitted in both orders.
pub fn transform_entailment(record: &RawRecord) -> Result<Vec<ScoredPair>, TransformError> {
    expect_kind(record, RecordKind::EntailmentTriple)?;
    let a = required(record, "sentence_a")?;
    let b = required(record, "sentence_b")?;
    let label = required(record, "label")?;
    let score = match label.trim().to_lowercase().as_str() {
        "entailment" => 2,
        "neutral" => 1,
        "contradiction" => 0,
        _ => return Err(TransformError::UnknownLabel(label.to_string())),
    };
    Ok(symmetric_pairs(record, a, b, score))
}

/// A labeled-text dataset held in memory, indexed by label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClsDatasetView {
    dataset: String,
    entries: Vec<(String, String)>,
    label_index: BTreeMap<String, Vec<usize>>,
}

impl ClsDatasetView {
    pub fn new(dataset: impl Into<String>) -> Self {
        ClsDatasetView {
            dataset: dataset.into(),
            ..Self::default()
        }
    }

    pub fn from_entries<I, S, L>(dataset: impl Into<String>, entries: I) -> Self
    where
        I: IntoIterator<Item = (S, L)>,
        S: Into<String>,
        L: Into<String>,
    {
        let mut view = Self::new(dataset);
        for (text, label) in entries {
            view.push(text, label);
        }
        view
    }

    pub fn from_records(records: &[RawRecord]) -> Result<Self, TransformError> {
        let mut view: Option<Self> = None;
        for record in records {
            expect_kind(record, RecordKind::LabeledText)?;
            let text = required(record, "text")?;
            let label = required(record, "label")?;
            view.get_or_insert_with(|| Self::new(&record.dataset))
                .push(text, label.trim());
        }
        Ok(view.unwrap_or_default())
    }

    pub fn push(&mut self, text: impl Into<String>, label: impl Into<String>) {
        let label = label.into();
        self.label_index
            .entry(label.clone())
            .or_default()
            .push(self.entries.len());
        self.entries.push((text.into(), label));
    }

    pub fn dataset(&self) -> &str {
        &self.dataset
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn label_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.label_index
    }

    pub fn num_labels(&self) -> usize {
        self.label_index.len()
    }

    pub fn label_of(&self, entry: usize) -> &str {
        &self.entries[entry].1
    }
}

/// Example-based classification samples: each text whose label has another
/// member becomes a query, with one same-label positive and up to
/// `negatives_per_sample` texts drawn from other labels.
pub fn transform_cls(
    view: &ClsDatasetView,
    negatives_per_sample: usize,
    seed: u64,
) -> Result<Vec<TrainingSample>, TransformError> {
    if view.num_labels() < 2 {
        return Err(TransformError::InsufficientLabels(view.num_labels()));
    }
    // entries outside each label, in index order
    let others: BTreeMap<&str, Vec<usize>> = view
        .label_index
        .keys()
        .map(|label| {
            let pool = (0..view.entries.len())
                .filter(|&i| view.entries[i].1 != *label)
                .collect();
            (label.as_str(), pool)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, (text, label)) in view.entries.iter().enumerate() {
        let same = &view.label_index[label];
        if same.len() < 2 {
            continue;
        }
        // uniform over same-label entries other than i
        let self_pos = same.binary_search(&i).expect("entry is indexed under its label");
        let mut pick = rng.random_range(0..same.len() - 1);
        if pick >= self_pos {
            pick += 1;
        }
        let positive = &view.entries[same[pick]].0;

        let pool = &others[label.as_str()];
        let k = negatives_per_sample.min(pool.len());
        let mut negatives = Vec::with_capacity(k);
        let mut neg_labels = Vec::with_capacity(k);
        for slot in index::sample(&mut rng, pool.len(), k) {
            let (neg_text, neg_label) = &view.entries[pool[slot]];
            if neg_text == positive || neg_text == text {
                continue;
            }
            negatives.push(neg_text.clone());
            neg_labels.push(neg_label.clone());
        }

        out.push(TrainingSample {
            dataset: view.dataset.clone(),
            task: TaskKind::Cls,
            query: text.clone(),
            positive: positive.clone(),
            negatives,
            instruction: String::new(),
            class_label: Some(label.clone()),
            neg_class_labels: Some(neg_labels),
            provenance: Provenance::Original,
        });
    }
    Ok(out)
}

/// Knobs for a whole-file transform.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformOptions {
    pub max_chars: usize,
    pub negatives_per_sample: usize,
    pub seed: u64,
    pub binarize_threshold: Option<f64>,
}

impl Default for TransformOptions {
    fn default() -> Self {
        TransformOptions {
            max_chars: DEFAULT_MAX_CHARS,
            negatives_per_sample: 4,
            seed: 0,
            binarize_threshold: None,
        }
    }
}

/// Result of transforming a file of records of one kind. Exactly one of
/// `samples` / `pairs` is populated depending on the kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransformOutput {
    pub samples: Vec<TrainingSample>,
    pub pairs: Vec<ScoredPair>,
}

/// Transform every record of `kind`; records of other kinds are an error.
/// Labeled-text records are grouped per dataset (first-seen order).
pub fn transform_records(
    kind: RecordKind,
    records: &[RawRecord],
    opts: &TransformOptions,
) -> Result<TransformOutput, TransformError> {
    let mut out = TransformOutput::default();
    match kind {
        RecordKind::TitleBody => {
            for r in records {
                out.samples.push(transform_title_body(r, opts.max_chars)?);
            }
        }
        RecordKind::QuestionAnswer => {
            for r in records {
                out.samples.push(transform_qa(r)?);
            }
        }
        RecordKind::ClaimEvidence => {
            let items = records
                .iter()
                .map(transform_claim_evidence)
                .collect::<Result<Vec<_>, _>>()?;
            out.samples = merge_claim_evidence(&items);
        }
        RecordKind::StsPair => {
            for r in records {
                out.pairs.extend(transform_sts(r, opts.binarize_threshold)?);
            }
        }
        RecordKind::EntailmentTriple => {
            for r in records {
                out.pairs.extend(transform_entailment(r)?);
            }
        }
        RecordKind::LabeledText => {
            let mut order: Vec<&str> = Vec::new();
            let mut by_dataset: BTreeMap<&str, Vec<RawRecord>> = BTreeMap::new();
            for r in records {
                by_dataset
                    .entry(r.dataset.as_str())
                    .or_insert_with(|| {
                        order.push(r.dataset.as_str());
                        Vec::new()
                    })
                    .push(r.clone());
            }
            for name in order {
                let view = ClsDatasetView::from_records(&by_dataset[name])?;
                out.samples
                    .extend(transform_cls(&view, opts.negatives_per_sample, opts.seed)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn title_body(title: &str, body: &str) -> RawRecord {
        RawRecord::new("wiki", RecordKind::TitleBody, [("title", title), ("body", body)])
    }

    #[test]
    fn title_body_short() {
        let s = transform_title_body(&title_body("T", "B"), 10).unwrap();
        assert_eq!((s.query.as_str(), s.positive.as_str()), ("T", "B"));
        assert_eq!(s.task, TaskKind::Retrieval);
        assert!(s.negatives.is_empty());
    }

    #[test]
    fn title_body_truncates_to_default_cap() {
        let body: String = (0..2000).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let s = transform_title_body(&title_body("T", &body), DEFAULT_MAX_CHARS).unwrap();
        assert_eq!(s.positive.chars().count(), 1536);
        assert!(body.starts_with(&s.positive));
    }

    #[test]
    fn truncation_counts_chars_not_bytes() {
        assert_eq!(truncate_chars("日本語テキスト", 3), "日本語");
        assert_eq!(truncate_chars("ab", 5), "ab");
    }

    #[test]
    fn title_body_blank_title() {
        assert!(matches!(
            transform_title_body(&title_body("", "B"), 10),
            Err(TransformError::EmptyField("title"))
        ));
        assert!(matches!(
            transform_title_body(&title_body("  ", "B"), 10),
            Err(TransformError::EmptyField("title"))
        ));
    }

    fn claim(c: &str, e: &str, label: &str) -> RawRecord {
        RawRecord::new(
            "fever",
            RecordKind::ClaimEvidence,
            [("claim", c), ("evidence", e), ("evidence_label", label)],
        )
    }

    #[test]
    fn claim_evidence_merges_refutes_as_negatives() {
        let items: Vec<_> = [claim("C", "E", "Supports"), claim("C", "E2", "REFUTES")]
            .iter()
            .map(|r| transform_claim_evidence(r).unwrap())
            .collect();
        let samples = merge_claim_evidence(&items);
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].query, "C");
        assert_eq!(samples[0].positive, "E");
        assert_eq!(samples[0].negatives, vec!["E2".to_string()]);
    }

    #[test]
    fn claim_with_only_refutes_is_dropped() {
        let items = vec![transform_claim_evidence(&claim("C", "E", "refutes")).unwrap()];
        assert!(merge_claim_evidence(&items).is_empty());
    }

    #[test]
    fn claim_unknown_label() {
        assert!(matches!(
            transform_claim_evidence(&claim("C", "E", "Maybe")),
            Err(TransformError::UnknownLabel(_))
        ));
    }

    #[test]
    fn qa_mapping_and_errors() {
        let r = RawRecord::new(
            "forum",
            RecordKind::QuestionAnswer,
            [("question", "Why is the sky blue?"), ("answer", "Rayleigh scattering")],
        );
        let s = transform_qa(&r).unwrap();
        assert_eq!(s.query, "Why is the sky blue?");
        assert_eq!(s.positive, "Rayleigh scattering");
        assert_eq!(s.provenance, Provenance::Original);
        assert_eq!(s.task, TaskKind::Retrieval);

        let blank = RawRecord::new("forum", RecordKind::QuestionAnswer, [("question", "Q"), ("answer", "")]);
        assert!(matches!(
            transform_qa(&blank),
            Err(TransformError::EmptyField("answer"))
        ));

        let multi: RawRecord = serde_json::from_str(
            r#"{"dataset":"forum","kind":"question_answer","question":["hi","and?"],"answer":["hello","more"]}"#,
        )
        .unwrap();
        assert!(matches!(transform_qa(&multi), Err(TransformError::MultiTurn)));
    }

    fn sts(label: &str) -> RawRecord {
        RawRecord::new(
            "stsb",
            RecordKind::StsPair,
            [("sentence_a", "a"), ("sentence_b", "b"), ("label", label)],
        )
    }

    #[test]
    fn sts_binary_labels() {
        let yes = transform_sts(&sts("yes"), None).unwrap();
        assert_eq!(
            yes,
            vec![
                ScoredPair::new("stsb", "a", "b", 1),
                ScoredPair::new("stsb", "b", "a", 1)
            ]
        );
        let f = transform_sts(&sts("FALSE"), None).unwrap();
        assert!(f.iter().all(|p| p.score == 0));
        assert_eq!(f[1].text_a, "b");
    }

    #[test]
    fn sts_numeric_labels_follow_threshold() {
        for (label, threshold) in [("4.8", 2.5), ("2.5", 2.5), ("1.2", 2.5), ("3.1", 3.2)] {
            let v: f64 = label.parse().unwrap();
            let expected = u8::from(v >= threshold);
            let pairs = transform_sts(&sts(label), Some(threshold)).unwrap();
            assert!(pairs.iter().all(|p| p.score == expected), "{label}");
        }
        assert!(matches!(
            transform_sts(&sts("4.8"), None),
            Err(TransformError::MissingThreshold(_))
        ));
        assert!(matches!(
            transform_sts(&sts("perhaps"), Some(1.0)),
            Err(TransformError::UnknownLabel(_))
        ));
    }

    #[test]
    fn entailment_scores() {
        let rec = |label: &str| {
            RawRecord::new(
                "snli",
                RecordKind::EntailmentTriple,
                [("sentence_a", "a"), ("sentence_b", "b"), ("label", label)],
            )
        };
        assert_eq!(
            transform_entailment(&rec("entailment")).unwrap(),
            vec![
                ScoredPair::new("snli", "a", "b", 2),
                ScoredPair::new("snli", "b", "a", 2)
            ]
        );
        assert!(transform_entailment(&rec("neutral"))
            .unwrap()
            .iter()
            .all(|p| p.score == 1));
        assert!(transform_entailment(&rec("contradiction"))
            .unwrap()
            .iter()
            .all(|p| p.score == 0));
        assert!(matches!(
            transform_entailment(&rec("maybe")),
            Err(TransformError::UnknownLabel(_))
        ));
        assert!(matches!(
            transform_entailment(&sts("yes")),
            Err(TransformError::WrongKind { .. })
        ));
    }

    #[test]
    fn cls_small_view_matches_enumerated_outputs() {
        let view = ClsDatasetView::from_entries("tiny", [("t1", "A"), ("t2", "A"), ("t3", "B")]);
        // Brute-force: every legal (query, pos, negs) for this view with one negative.
        let mut legal = Vec::new();
        for (qi, (q, ql)) in view.entries().iter().enumerate() {
            for (pi, (p, pl)) in view.entries().iter().enumerate() {
                for (n, nl) in view.entries() {
                    if qi != pi && pl == ql && nl != ql {
                        legal.push((q.clone(), p.clone(), vec![n.clone()], ql.clone()));
                    }
                }
            }
        }
        for seed in 0..20 {
            let out = transform_cls(&view, 1, seed).unwrap();
            assert_eq!(out.len(), 2, "t3 is a singleton label and yields nothing");
            for s in &out {
                let key = (
                    s.query.clone(),
                    s.positive.clone(),
                    s.negatives.clone(),
                    s.class_label.clone().unwrap(),
                );
                assert!(legal.contains(&key), "{key:?} not legal");
                assert_eq!(s.neg_class_labels.as_deref(), Some(&["B".to_string()][..]));
                s.validate().unwrap();
            }
            assert_eq!(out[0].query, "t1");
            assert_eq!(out[0].positive, "t2");
        }
    }

    #[test]
    fn cls_needs_two_labels() {
        let view = ClsDatasetView::from_entries("one", [("a", "X"), ("b", "X")]);
        assert!(matches!(
            transform_cls(&view, 1, 0),
            Err(TransformError::InsufficientLabels(1))
        ));
    }

    #[test]
    fn cls_is_deterministic_and_positive_is_never_self() {
        let entries: Vec<(String, String)> = (0..60).map(|i| (format!("text {i}"), format!("L{}", i % 4))).collect();
        let view = ClsDatasetView::from_entries("d", entries);
        let a = transform_cls(&view, 3, 11).unwrap();
        let b = transform_cls(&view, 3, 11).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert_ne!(s.query, s.positive);
            assert_eq!(s.negatives.len(), 3);
        }
    }

    #[test]
    fn transform_records_rejects_mixed_kinds() {
        let recs = vec![title_body("T", "B"), sts("yes")];
        assert!(transform_records(RecordKind::TitleBody, &recs, &TransformOptions::default()).is_err());
    }
}
