//! Canonical data model shared by every pipeline stage: raw source records,
//! training samples, scored pairs, the instruction registry, and JSON Lines
//! readers/writers for all of them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{kind:?} record is missing field `{field}`")]
    MissingField { kind: RecordKind, field: &'static str },
    #[error("field `{0}` is empty")]
    EmptyField(String),
    #[error("dataset name is empty")]
    EmptyDatasetName,
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("score {0} is outside the ordinal range 0..=2")]
    InvalidScore(u8),
    #[error("instruction for dataset `{0}` is empty")]
    EmptyInstruction(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Source format of a raw record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    TitleBody,
    ClaimEvidence,
    QuestionAnswer,
    StsPair,
    EntailmentTriple,
    LabeledText,
}

impl RecordKind {
    /// Payload keys that must be present and non-empty for this kind.
    pub fn required_fields(self) -> &'static [&'static str] {
        match self {
            RecordKind::TitleBody => &["title", "body"],
            RecordKind::ClaimEvidence => &["claim", "evidence", "evidence_label"],
            RecordKind::QuestionAnswer => &["question", "answer"],
            RecordKind::StsPair | RecordKind::EntailmentTriple => &["sentence_a", "sentence_b", "label"],
            RecordKind::LabeledText => &["text", "label"],
        }
    }
}

/// An untyped source record. On the wire the payload keys sit next to
/// `dataset` and `kind`; scalar JSON values are stringified on read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRecordWire", into = "RawRecordWire")]
pub struct RawRecord {
    pub dataset: String,
    pub kind: RecordKind,
    pub payload: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct RawRecordWire {
    dataset: String,
    kind: RecordKind,
    #[serde(flatten)]
    payload: BTreeMap<String, serde_json::Value>,
}

impl TryFrom<RawRecordWire> for RawRecord {
    type Error = String;

    fn try_from(wire: RawRecordWire) -> Result<Self, Self::Error> {
        let mut payload = BTreeMap::new();
        for (key, value) in wire.payload {
            let text = match value {
                serde_json::Value::String(s) => s,
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                serde_json::Value::Null => continue,
                other => {
                    // structured values (e.g. multi-turn transcripts) are kept
                    // verbatim so the transform can reject them explicitly
                    other.to_string()
                }
            };
            payload.insert(key, text);
        }
        Ok(RawRecord {
            dataset: wire.dataset,
            kind: wire.kind,
            payload,
        })
    }
}

impl From<RawRecord> for RawRecordWire {
    fn from(record: RawRecord) -> Self {
        RawRecordWire {
            dataset: record.dataset,
            kind: record.kind,
            payload: record
                .payload
                .into_iter()
                .map(|(k, v)| (k, serde_json::Value::String(v)))
                .collect(),
        }
    }
}

impl RawRecord {
    pub fn new<I, K, V>(dataset: impl Into<String>, kind: RecordKind, fields: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        RawRecord {
            dataset: dataset.into(),
            kind,
            payload: fields.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }

    pub fn field(&self, key: &str) -> Option<&str> {
        self.payload.get(key).map(String::as_str)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.dataset.trim().is_empty() {
            return Err(CorpusError::EmptyDatasetName);
        }
        for &field in self.kind.required_fields() {
            match self.payload.get(field) {
                None => return Err(CorpusError::MissingField { kind: self.kind, field }),
                Some(v) if v.trim().is_empty() => return Err(CorpusError::EmptyField(field.to_string())),
                Some(_) => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Retrieval,
    Nli,
    Cls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Original,
    Paraphrased,
    Augmented,
    SynthNegative,
}

/// The canonical (query, positive, negatives, instruction) training unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub dataset: String,
    pub task: TaskKind,
    pub query: String,
    #[serde(rename = "pos")]
    pub positive: String,
    #[serde(rename = "negs", default)]
    pub negatives: Vec<String>,
    #[serde(default)]
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    /// Labels of `negatives`, aligned by index. CLS only; needed to mask
    /// same-class in-batch items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neg_class_labels: Option<Vec<String>>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl TrainingSample {
    pub fn retrieval(dataset: impl Into<String>, query: impl Into<String>, positive: impl Into<String>) -> Self {
        TrainingSample {
            dataset: dataset.into(),
            task: TaskKind::Retrieval,
            query: query.into(),
            positive: positive.into(),
            negatives: Vec::new(),
            instruction: String::new(),
            class_label: None,
            neg_class_labels: None,
            provenance: Provenance::Original,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.dataset.trim().is_empty() {
            return Err(CorpusError::EmptyDatasetName);
        }
        if self.query.trim().is_empty() {
            return Err(CorpusError::EmptyField("query".into()));
        }
        if self.positive.trim().is_empty() {
            return Err(CorpusError::EmptyField("pos".into()));
        }
        match (self.task, &self.class_label) {
            (TaskKind::Cls, None) => return Err(CorpusError::InvalidSample("cls sample without class_label".into())),
            (TaskKind::Retrieval | TaskKind::Nli, Some(_)) => {
                return Err(CorpusError::InvalidSample("class_label on a non-cls sample".into()))
            }
            _ => {}
        }
        if let Some(labels) = &self.neg_class_labels {
            if self.task != TaskKind::Cls {
                return Err(CorpusError::InvalidSample(
                    "neg_class_labels on a non-cls sample".into(),
                ));
            }
            if labels.len() != self.negatives.len() {
                return Err(CorpusError::InvalidSample(format!(
                    "{} negatives but {} negative labels",
                    self.negatives.len(),
                    labels.len()
                )));
            }
        }
        if self.negatives.iter().any(|n| n == &self.positive) {
            return Err(CorpusError::InvalidSample("a negative equals the positive".into()));
        }
        Ok(())
    }
}

/// (text_a, text_b, ordinal score) for Cosent-trained data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub dataset: String,
    pub text_a: String,
    pub text_b: String,
    pub score: u8,
}

impl ScoredPair {
    pub fn new(dataset: impl Into<String>, text_a: impl Into<String>, text_b: impl Into<String>, score: u8) -> Self {
        ScoredPair {
            dataset: dataset.into(),
            text_a: text_a.into(),
            text_b: text_b.into(),
            score,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.dataset.trim().is_empty() {
            return Err(CorpusError::EmptyDatasetName);
        }
        if self.text_a.trim().is_empty() {
            return Err(CorpusError::EmptyField("text_a".into()));
        }
        if self.text_b.trim().is_empty() {
            return Err(CorpusError::EmptyField("text_b".into()));
        }
        if self.score > 2 {
            return Err(CorpusError::InvalidScore(self.score));
        }
        Ok(())
    }
}

/// Dataset name to instruction template.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstructionRegistry {
    entries: BTreeMap<String, String>,
}

impl InstructionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Instructions for the externally sourced datasets that ship without one.
    pub fn builtin() -> Self {
        let mut registry = Self::new();
        for (name, text) in [
            (
                "Huatuo",
                "Given a medical question, retrieve user replies that best answer the question",
            ),
            (
                "Reddit",
                "Retrieve the paragraph most semantically similar to the given statement",
            ),
            (
                "Law-GPT",
                "Retrieve relevant legal provisions or interpretations for the given case",
            ),
            ("MNLI", "Retrieve semantically similar text"),
            ("SNLI", "Retrieve semantically similar text"),
            ("Yelp", "Classify the customer review of businesses"),
            ("Weibo", "Classify the sentiment of Weibo comments"),
        ] {
            registry.insert(name, text).expect("builtin instructions are non-empty");
        }
        registry
    }

    pub fn insert(&mut self, dataset: impl Into<String>, instruction: impl Into<String>) -> Result<(), CorpusError> {
        let dataset = dataset.into();
        let instruction = instruction.into();
        if instruction.trim().is_empty() {
            return Err(CorpusError::EmptyInstruction(dataset));
        }
        self.entries.insert(dataset, instruction);
        Ok(())
    }

    pub fn get(&self, dataset: &str) -> Option<&str> {
        self.entries.get(dataset).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Merge `other` over `self`; entries in `other` win.
    pub fn extend(&mut self, other: InstructionRegistry) {
        self.entries.extend(other.entries);
    }

    pub fn from_json_str(text: &str) -> Result<Self, CorpusError> {
        let entries: BTreeMap<String, String> =
            serde_json::from_str(text).map_err(|source| CorpusError::Parse { line: 1, source })?;
        let mut registry = Self::new();
        for (k, v) in entries {
            registry.insert(k, v)?;
        }
        Ok(registry)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_json_str(&text)
    }
}

/// Emitted when neither the sample nor the registry provides an instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingInstruction {
    pub dataset: String,
}

/// Keep an existing instruction; otherwise fill it from the registry.
pub fn attach_instruction(
    mut sample: TrainingSample,
    registry: &InstructionRegistry,
) -> (TrainingSample, Option<MissingInstruction>) {
    if !sample.instruction.is_empty() {
        return (sample, None);
    }
    match registry.get(&sample.dataset) {
        Some(text) => {
            sample.instruction = text.to_string();
            (sample, None)
        }
        None => {
            let warning = MissingInstruction {
                dataset: sample.dataset.clone(),
            };
            (sample, Some(warning))
        }
    }
}

/// Streaming JSON Lines reader. Blank lines are skipped; a leading UTF-8 BOM
/// is tolerated.
pub struct JsonlReader<T, R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    _item: PhantomData<T>,
}

impl<T: DeserializeOwned, R: BufRead> JsonlReader<T, R> {
    pub fn new(reader: R) -> Self {
        JsonlReader {
            lines: reader.lines(),
            line_no: 0,
            _item: PhantomData,
        }
    }
}

impl<T: DeserializeOwned> JsonlReader<T, BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
        Ok(Self::new(BufReader::new(file)))
    }
}

impl<T: DeserializeOwned, R: BufRead> Iterator for JsonlReader<T, R> {
    type Item = Result<T, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(CorpusError::io(Path::new("<stream>"), e))),
            };
            self.line_no += 1;
            let text = if self.line_no == 1 {
                line.trim_start_matches('\u{feff}')
            } else {
                line.as_str()
            };
            if text.trim().is_empty() {
                continue;
            }
            let line = self.line_no;
            return Some(serde_json::from_str(text).map_err(|source| CorpusError::Parse { line, source }));
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    JsonlReader::open(path)?.collect()
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, CorpusError> {
    JsonlReader::new(text.as_bytes()).collect()
}

pub fn write_jsonl_to<T: Serialize, W: Write>(
    mut writer: W,
    items: impl IntoIterator<Item = T>,
) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, &item)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CorpusError::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    write_jsonl_to(BufWriter::new(file), items).map_err(|e| CorpusError::io(path, e))
}

pub fn to_jsonl_string<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut buf = Vec::new();
    write_jsonl_to(&mut buf, items).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrainingSample {
        TrainingSample::retrieval("Huatuo", "q", "p")
    }

    #[test]
    fn attach_from_registry() {
        let (s, warn) = attach_instruction(sample(), &InstructionRegistry::builtin());
        assert!(warn.is_none());
        assert_eq!(
            s.instruction,
            "Given a medical question, retrieve user replies that best answer the question"
        );
    }

    #[test]
    fn attach_keeps_existing_instruction() {
        let mut s = sample();
        s.instruction = "existing".into();
        let (s, warn) = attach_instruction(s, &InstructionRegistry::builtin());
        assert_eq!(s.instruction, "existing");
        assert!(warn.is_none());
    }

    #[test]
    fn attach_unknown_dataset_warns() {
        let mut s = sample();
        s.dataset = "unknownX".into();
        let (s, warn) = attach_instruction(s, &InstructionRegistry::builtin());
        assert_eq!(s.instruction, "");
        assert_eq!(
            warn,
            Some(MissingInstruction {
                dataset: "unknownX".into()
            })
        );
    }

    #[test]
    fn attach_is_idempotent() {
        let registry = InstructionRegistry::builtin();
        let (once, _) = attach_instruction(sample(), &registry);
        let (twice, _) = attach_instruction(once.clone(), &registry);
        assert_eq!(once, twice);
    }

    #[test]
    fn registry_rejects_empty_and_reports_absent() {
        let mut r = InstructionRegistry::new();
        assert!(matches!(r.insert("x", "  "), Err(CorpusError::EmptyInstruction(_))));
        assert_eq!(r.get("x"), None);
        let parsed = InstructionRegistry::from_json_str(r#"{"a": "do a"}"#).unwrap();
        assert_eq!(parsed.get("a"), Some("do a"));
        assert!(InstructionRegistry::from_json_str(r#"{"a": ""}"#).is_err());
    }

    #[test]
    fn sample_wire_field_names() {
        let mut s = sample();
        s.negatives = vec!["n".into()];
        let line = serde_json::to_string(&s).unwrap();
        assert_eq!(
            line,
            r#"{"dataset":"Huatuo","task":"retrieval","query":"q","pos":"p","negs":["n"],"instruction":"","provenance":"original"}"#
        );
    }

    #[test]
    fn sample_invariants() {
        let mut s = sample();
        s.negatives = vec!["p".into()];
        assert!(s.validate().is_err());
        let mut s = sample();
        s.task = TaskKind::Cls;
        assert!(s.validate().is_err());
        s.class_label = Some("A".into());
        assert!(s.validate().is_ok());
        let mut s = sample();
        s.class_label = Some("A".into());
        assert!(s.validate().is_err());
        let mut s = sample();
        s.query = "  ".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn raw_record_stringifies_scalars_and_validates() {
        let line = r#"{"dataset":"stsb","kind":"sts_pair","sentence_a":"a","sentence_b":"b","label":4.8}"#;
        let rec: RawRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.field("label"), Some("4.8"));
        assert!(rec.validate().is_ok());
        let rec = RawRecord::new("d", RecordKind::TitleBody, [("title", "t")]);
        assert!(matches!(
            rec.validate(),
            Err(CorpusError::MissingField { field: "body", .. })
        ));
    }

    #[test]
    fn jsonl_reader_skips_blank_lines_and_bom() {
        let text = "\u{feff}{\"dataset\":\"d\",\"text_a\":\"a\",\"text_b\":\"b\",\"score\":1}\n\n{\"dataset\":\"d\",\"text_a\":\"b\",\"text_b\":\"a\",\"score\":1}\n";
        let pairs: Vec<ScoredPair> = parse_jsonl(text).unwrap();
        assert_eq!(pairs.len(), 2);
        let bad = "{\"dataset\":1}\n";
        match parse_jsonl::<ScoredPair>(bad) {
            Err(CorpusError::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pair_score_range() {
        assert!(ScoredPair::new("d", "a", "b", 2).validate().is_ok());
        assert!(matches!(
            ScoredPair::new("d", "a", "b", 3).validate(),
            Err(CorpusError::InvalidScore(3))
        ));
    }
}
