//! LLM-driven corpus synthesis: paraphrasing, topic augmentation and hard
//! negative generation, each governed by a [`ConstraintSet`] rendered into
//! the prompt and re-checked mechanically on the output.

mod client;
mod policy;
mod stub;
mod validate;

pub use client::{parallel_map, parse_items, with_retries, ApiError, HttpClient, LlmClient, LlmClientConfig};
pub use policy::{
    apply_cls_policy, apply_nli_policy, apply_retrieval_policy, eligible_for_expansion, NliPolicy,
    DEFAULT_EXPANSION_THRESHOLD,
};
pub use stub::{FaultKind, StubClient, StubOutput};
pub use validate::{dominant_script, script_of, validate_synthesis, Script, ValidationReport};

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{CorpusError, Provenance, TaskKind, TrainingSample};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SynthesisError {
    #[error("constraints do not fit {kind:?}: {reason}")]
    ConstraintKindMismatch { kind: SynthKind, reason: String },
    #[error("invalid constraints: {0}")]
    InvalidConstraints(String),
    #[error("policy violation: {0}")]
    PolicyViolation(String),
    #[error("generated negative equals the positive")]
    DegenerateOutput,
    #[error("invalid source sample: {0}")]
    InvalidSample(String),
    #[error(transparent)]
    Api(#[from] ApiError),
}

impl From<CorpusError> for SynthesisError {
    fn from(e: CorpusError) -> Self {
        SynthesisError::InvalidSample(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Paraphrase,
    Augment,
    HardNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationMode {
    /// fails to adequately answer the query
    SemanticDeviation,
    /// carries unnecessary content
    IrrelevantInfo,
    /// same topic, different aspect
    SameTopicDifferentAspect,
}

impl DegradationMode {
    pub const ALL: [DegradationMode; 3] = [
        DegradationMode::SemanticDeviation,
        DegradationMode::IrrelevantInfo,
        DegradationMode::SameTopicDifferentAspect,
    ];

    fn describe(self) -> &'static str {
        match self {
            DegradationMode::SemanticDeviation => "semantic deviation (it does not adequately answer the query)",
            DegradationMode::IrrelevantInfo => "irrelevant information (it carries unnecessary content)",
            DegradationMode::SameTopicDifferentAspect => "a different aspect of the same topic",
        }
    }
}

/// Generation constraints; each set flag becomes one prompt clause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub keep_core_semantics: bool,
    pub allow_structural_variation: bool,
    /// allowed relative character-length deviation, in (0, 1)
    pub max_length_deviation: f64,
    pub keep_language: bool,
    pub stay_in_field: bool,
    /// augmentation only
    pub require_topic_shift: bool,
    pub pos_necessary_and_sufficient: bool,
    /// hard-negative generation only
    #[serde(default)]
    pub negative_degradation_modes: BTreeSet<DegradationMode>,
    pub imitate_structure: bool,
}

impl ConstraintSet {
    fn base() -> Self {
        ConstraintSet {
            keep_core_semantics: false,
            allow_structural_variation: false,
            max_length_deviation: 0.15,
            keep_language: true,
            stay_in_field: false,
            require_topic_shift: false,
            pos_necessary_and_sufficient: false,
            negative_degradation_modes: BTreeSet::new(),
            imitate_structure: false,
        }
    }

    pub fn paraphrase() -> Self {
        ConstraintSet {
            keep_core_semantics: true,
            allow_structural_variation: true,
            ..Self::base()
        }
    }

    pub fn augment() -> Self {
        ConstraintSet {
            stay_in_field: true,
            require_topic_shift: true,
            pos_necessary_and_sufficient: true,
            ..Self::base()
        }
    }

    pub fn hard_negative() -> Self {
        ConstraintSet {
            stay_in_field: true,
            negative_degradation_modes: DegradationMode::ALL.into_iter().collect(),
            imitate_structure: true,
            ..Self::base()
        }
    }

    pub fn for_kind(kind: SynthKind) -> Self {
        match kind {
            SynthKind::Paraphrase => Self::paraphrase(),
            SynthKind::Augment => Self::augment(),
            SynthKind::HardNegative => Self::hard_negative(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        let d = self.max_length_deviation;
        if !(d > 0.0 && d < 1.0) {
            return Err(SynthesisError::InvalidConstraints(format!(
                "max_length_deviation {d} outside (0, 1)"
            )));
        }
        Ok(())
    }

    /// Valid for `kind`: topic shift only when augmenting, degradation modes
    /// only (and necessarily) for hard negatives.
    pub fn check_kind(&self, kind: SynthKind) -> Result<(), SynthesisError> {
        self.validate()?;
        let mismatch = |reason: &str| {
            Err(SynthesisError::ConstraintKindMismatch {
                kind,
                reason: reason.to_string(),
            })
        };
        if self.require_topic_shift && kind != SynthKind::Augment {
            return mismatch("topic shift applies to augmentation only");
        }
        match (kind, self.negative_degradation_modes.is_empty()) {
            (SynthKind::HardNegative, true) => mismatch("hard negatives need at least one degradation mode"),
            (SynthKind::Paraphrase | SynthKind::Augment, false) => {
                mismatch("degradation modes apply to hard-negative generation only")
            }
            _ => Ok(()),
        }
    }

    /// One instruction sentence per active constraint.
    pub fn clauses(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.keep_core_semantics {
            out.push("Preserve core semantics: the core meaning of the original must stay intact.".to_string());
        }
        if self.allow_structural_variation {
            out.push("Vary morphology, syntax, grammar, tense and rhetoric freely.".to_string());
        }
        out.push(format!(
            "Stay within ±{}% length of the original, counted in characters.",
            format_percent(self.max_length_deviation)
        ));
        if self.keep_language {
            out.push("Keep language: write in the same language as the original.".to_string());
        }
        if self.stay_in_field {
            out.push("Stay close in field: keep strictly to the domain of the original.".to_string());
        }
        if self.require_topic_shift {
            out.push(
                "Transfer, expand or extend the topic, prohibiting pure rewriting of the original topic.".to_string(),
            );
        }
        if self.pos_necessary_and_sufficient {
            out.push(
                "The positive must be the perfect answer: it addresses the query unambiguously (necessary) \
                 and contains only relevant content (sufficient)."
                    .to_string(),
            );
        }
        if !self.negative_degradation_modes.is_empty() {
            let modes: Vec<&str> = self.negative_degradation_modes.iter().map(|m| m.describe()).collect();
            out.push(format!(
                "Each negative must be worse than the positive through one of: {}.",
                modes.join("; ")
            ));
        }
        if self.imitate_structure {
            out.push("Imitate the syntax and sentence structure of the positive.".to_string());
        }
        out
    }
}

fn format_percent(fraction: f64) -> String {
    let pct = fraction * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct:.1}")
    }
}

/// Rendered prompt for one source item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub kind: SynthKind,
    pub system_text: String,
    pub user_text: String,
    pub constraints: ConstraintSet,
    pub expected_outputs: usize,
}

/// Marker of the machine-readable copy of the source inside `user_text`.
pub const SOURCE_MARKER: &str = "Source (JSON): ";

impl PromptSpec {
    pub fn with_expected_outputs(mut self, n: usize) -> Self {
        self.expected_outputs = n;
        self.user_text = render_user_text(self.kind, &self.constraints, n, &self.source_value());
        self
    }

    /// The source item embedded in `user_text`.
    pub fn source_value(&self) -> Value {
        self.user_text
            .lines()
            .find_map(|l| l.strip_prefix(SOURCE_MARKER))
            .and_then(|j| serde_json::from_str(j).ok())
            .unwrap_or(Value::Null)
    }
}

fn system_text(kind: SynthKind, sentence: bool) -> &'static str {
    match (kind, sentence) {
        (SynthKind::Paraphrase, true) => "You rewrite sentences used to train a text-embedding model.",
        (SynthKind::Paraphrase, false) => {
            "You rewrite (query, positive) training pairs for a text-embedding model. Rewrite both the query and the positive."
        }
        (SynthKind::Augment, _) => {
            "You create new (query, positive, negative) training samples for a text-embedding model from a seed pair."
        }
        (SynthKind::HardNegative, _) => "You write hard negative passages for a text-embedding model.",
    }
}

fn render_user_text(kind: SynthKind, constraints: &ConstraintSet, n: usize, source: &Value) -> String {
    let sentence = source.get("text").is_some();
    let field = |k: &str| source.get(k).and_then(Value::as_str).unwrap_or_default();
    let mut s = String::new();
    if sentence {
        let _ = writeln!(s, "Sentence: {}", field("text"));
    } else {
        let _ = writeln!(s, "Query: {}", field("query"));
        let _ = writeln!(s, "Positive: {}", field("pos"));
    }
    s.push_str("Constraints:\n");
    for c in constraints.clauses() {
        let _ = writeln!(s, "- {c}");
    }
    let shape = match (kind, sentence) {
        (SynthKind::Paraphrase, true) => "a string",
        (SynthKind::Paraphrase, false) => r#"an object {"query": ..., "pos": ...}"#,
        (SynthKind::Augment, _) => r#"an object {"query": ..., "pos": ..., "neg": ...}"#,
        (SynthKind::HardNegative, _) => "a string holding one negative passage",
    };
    let _ = writeln!(s, "Return exactly {n} items as a JSON array; each item is {shape}.");
    let _ = write!(s, "{SOURCE_MARKER}{source}");
    s
}

/// Prompt for a (query, positive) sample. The sample's texts appear
/// verbatim, followed by one clause per active constraint.
pub fn build_prompt(
    kind: SynthKind,
    sample: &TrainingSample,
    constraints: &ConstraintSet,
) -> Result<PromptSpec, SynthesisError> {
    sample.validate()?;
    constraints.check_kind(kind)?;
    let source = json!({"query": sample.query, "pos": sample.positive});
    Ok(PromptSpec {
        kind,
        system_text: system_text(kind, false).to_string(),
        user_text: render_user_text(kind, constraints, 1, &source),
        constraints: constraints.clone(),
        expected_outputs: 1,
    })
}

/// Paraphrase prompt for one standalone sentence (NLI and CLS rewriting).
pub fn build_sentence_prompt(text: &str, constraints: &ConstraintSet) -> Result<PromptSpec, SynthesisError> {
    if text.trim().is_empty() {
        return Err(SynthesisError::InvalidSample("empty sentence".into()));
    }
    constraints.check_kind(SynthKind::Paraphrase)?;
    let source = json!({ "text": text });
    Ok(PromptSpec {
        kind: SynthKind::Paraphrase,
        system_text: system_text(SynthKind::Paraphrase, true).to_string(),
        user_text: render_user_text(SynthKind::Paraphrase, constraints, 1, &source),
        constraints: constraints.clone(),
        expected_outputs: 1,
    })
}

/// One accepted generated text and what it was checked against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub kind: SynthKind,
    pub field: String,
    pub original: String,
    pub generated: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub field: String,
    pub reasons: Vec<String>,
}

/// Accepted outputs of one synthesis call plus what was dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesized<T> {
    pub items: Vec<T>,
    /// audit trail: every accepted text with its reference
    pub records: Vec<SynthRecord>,
    pub rejected: Vec<Rejection>,
    /// outputs dropped for equalling the positive
    pub degenerate: usize,
}

impl<T> Default for Synthesized<T> {
    fn default() -> Self {
        Synthesized {
            items: Vec::new(),
            records: Vec::new(),
            rejected: Vec::new(),
            degenerate: 0,
        }
    }
}

/// Validates the fields of one generated item, collecting records for the
/// passing ones and rejections for the rest.
struct ItemCheck<'a> {
    kind: SynthKind,
    constraints: &'a ConstraintSet,
    records: Vec<SynthRecord>,
    reasons: Vec<String>,
    fields: Vec<String>,
}

impl<'a> ItemCheck<'a> {
    fn new(kind: SynthKind, constraints: &'a ConstraintSet) -> Self {
        ItemCheck {
            kind,
            constraints,
            records: Vec::new(),
            reasons: Vec::new(),
            fields: Vec::new(),
        }
    }

    fn field(&mut self, name: &str, original: &str, generated: Option<&str>) -> String {
        let Some(generated) = generated else {
            self.fields.push(name.to_string());
            self.reasons.push("malformed".to_string());
            return String::new();
        };
        let report = validate_synthesis(original, generated, self.constraints);
        if report.passed {
            self.records.push(SynthRecord {
                kind: self.kind,
                field: name.to_string(),
                original: original.to_string(),
                generated: generated.to_string(),
            });
        } else {
            self.fields.push(name.to_string());
            self.reasons.extend(report.rejection_reasons);
        }
        generated.to_string()
    }

    /// Commit to `out` if every field passed.
    fn finish<T>(self, item: T, out: &mut Synthesized<T>) {
        if self.reasons.is_empty() {
            out.items.push(item);
            out.records.extend(self.records);
        } else {
            out.rejected.push(Rejection {
                field: self.fields.join(","),
                reasons: self.reasons,
            });
        }
    }
}

fn str_field<'v>(item: &'v Value, key: &str) -> Option<&'v str> {
    item.get(key).and_then(Value::as_str)
}

fn require_retrieval(sample: &TrainingSample, what: &str) -> Result<(), SynthesisError> {
    if sample.task != TaskKind::Retrieval {
        return Err(SynthesisError::PolicyViolation(format!(
            "{what} applies to retrieval samples only, got {:?}",
            sample.task
        )));
    }
    Ok(())
}

/// Rewrite both query and positive `n_variants` times. Variants failing
/// validation are dropped and recorded in `rejected`.
pub fn paraphrase(
    sample: &TrainingSample,
    client: &dyn LlmClient,
    constraints: &ConstraintSet,
    n_variants: usize,
) -> Result<Synthesized<TrainingSample>, SynthesisError> {
    require_retrieval(sample, "pair paraphrasing")?;
    let prompt = build_prompt(SynthKind::Paraphrase, sample, constraints)?.with_expected_outputs(n_variants);
    let mut out = Synthesized::default();
    if n_variants == 0 {
        return Ok(out);
    }
    for item in client.generate(&prompt)?.iter().take(n_variants) {
        let mut check = ItemCheck::new(SynthKind::Paraphrase, constraints);
        let query = check.field("query", &sample.query, str_field(item, "query"));
        let positive = check.field("pos", &sample.positive, str_field(item, "pos"));
        let mut variant = sample.clone();
        variant.negatives.retain(|n| *n != positive);
        variant.query = query;
        variant.positive = positive;
        variant.provenance = Provenance::Paraphrased;
        check.finish(variant, &mut out);
    }
    Ok(out)
}

/// New (query, positive, negative) samples on shifted topics in the same
/// field. Retrieval samples only.
pub fn augment(
    sample: &TrainingSample,
    client: &dyn LlmClient,
    constraints: &ConstraintSet,
    n_new: usize,
) -> Result<Synthesized<TrainingSample>, SynthesisError> {
    require_retrieval(sample, "augmentation")?;
    let prompt = build_prompt(SynthKind::Augment, sample, constraints)?.with_expected_outputs(n_new);
    let mut out = Synthesized::default();
    if n_new == 0 {
        return Ok(out);
    }
    for item in client.generate(&prompt)?.iter().take(n_new) {
        let mut check = ItemCheck::new(SynthKind::Augment, constraints);
        let query = check.field("query", &sample.query, str_field(item, "query"));
        let positive = check.field("pos", &sample.positive, str_field(item, "pos"));
        let negative = check.field("neg", &positive, str_field(item, "neg"));
        let new = TrainingSample {
            dataset: sample.dataset.clone(),
            task: TaskKind::Retrieval,
            query,
            positive,
            negatives: vec![negative],
            instruction: sample.instruction.clone(),
            class_label: None,
            neg_class_labels: None,
            provenance: Provenance::Augmented,
        };
        check.finish(new, &mut out);
    }
    Ok(out)
}

/// `k` negatives imitating the positive's structure but degraded. Outputs
/// equal to the positive count as degenerate and are dropped.
pub fn gen_hard_negatives(
    sample: &TrainingSample,
    client: &dyn LlmClient,
    constraints: &ConstraintSet,
    k: usize,
) -> Result<Synthesized<String>, SynthesisError> {
    require_retrieval(sample, "hard-negative generation")?;
    let prompt = build_prompt(SynthKind::HardNegative, sample, constraints)?.with_expected_outputs(k);
    let mut out = Synthesized::default();
    if k == 0 {
        return Ok(out);
    }
    for item in client.generate(&prompt)?.iter().take(k) {
        let text = item.as_str().or_else(|| str_field(item, "neg"));
        if let Some(t) = text {
            if check_not_degenerate(t, &sample.positive).is_err() {
                out.degenerate += 1;
                continue;
            }
        }
        let mut check = ItemCheck::new(SynthKind::HardNegative, constraints);
        let negative = check.field("neg", &sample.positive, text);
        check.finish(negative, &mut out);
    }
    Ok(out)
}

pub fn check_not_degenerate(negative: &str, positive: &str) -> Result<(), SynthesisError> {
    if negative.trim() == positive.trim() {
        Err(SynthesisError::DegenerateOutput)
    } else {
        Ok(())
    }
}

/// Paraphrase one standalone sentence `n` times.
pub fn rewrite_sentence(
    text: &str,
    client: &dyn LlmClient,
    constraints: &ConstraintSet,
    n: usize,
) -> Result<Synthesized<String>, SynthesisError> {
    let prompt = build_sentence_prompt(text, constraints)?.with_expected_outputs(n);
    let mut out = Synthesized::default();
    if n == 0 {
        return Ok(out);
    }
    for item in client.generate(&prompt)?.iter().take(n) {
        let mut check = ItemCheck::new(SynthKind::Paraphrase, constraints);
        let rewritten = check.field("text", text, item.as_str().or_else(|| str_field(item, "text")));
        check.finish(rewritten, &mut out);
    }
    Ok(out)
}

/// Counters over a batch of synthesis calls.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthStats {
    pub sources: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub degenerate: usize,
    /// sources whose request failed after retries
    pub api_errors: usize,
}

/// Run `op` over `sources` with up to `max_parallel` calls in flight.
/// Results are in source order; failed sources yield an empty result and
/// count in `api_errors`. Errors other than API failures abort.
pub fn run_batch<S: Sync, T: Send>(
    sources: &[S],
    max_parallel: usize,
    op: impl Fn(&S) -> Result<Synthesized<T>, SynthesisError> + Sync,
) -> Result<(Vec<Synthesized<T>>, SynthStats), SynthesisError> {
    let results = parallel_map(sources, max_parallel, |_, s| op(s));
    let mut stats = SynthStats {
        sources: sources.len(),
        ..SynthStats::default()
    };
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(s) => {
                stats.accepted += s.items.len();
                stats.rejected += s.rejected.len();
                stats.degenerate += s.degenerate;
                out.push(s);
            }
            Err(SynthesisError::Api(_)) => {
                stats.api_errors += 1;
                out.push(Synthesized::default());
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, stats))
}

/// Re-run the validator over an audit trail; returns the failing records.
pub fn audit(records: &[SynthRecord], constraints_for: impl Fn(SynthKind) -> ConstraintSet) -> Vec<SynthRecord> {
    records
        .iter()
        .filter(|r| !validate_synthesis(&r.original, &r.generated, &constraints_for(r.kind)).passed)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn credit_card() -> TrainingSample {
        TrainingSample::retrieval(
            "fiqa",
            "What is the best credit card for someone with no credit history?",
            "If you've never had a credit card before a likely reason can be due to lack of credit history. \
             You can apply for a department store card.",
        )
    }

    #[test]
    fn paraphrase_prompt_has_semantics_and_length_clauses() {
        let p = build_prompt(SynthKind::Paraphrase, &credit_card(), &ConstraintSet::paraphrase()).unwrap();
        assert!(p.user_text.contains("Preserve core semantics"));
        assert!(p.user_text.contains("±15% length"));
        assert!(p.user_text.contains(&credit_card().query));
        assert!(p.user_text.contains(&credit_card().positive));
    }

    #[test]
    fn augment_prompt_prohibits_pure_rewriting() {
        let p = build_prompt(SynthKind::Augment, &credit_card(), &ConstraintSet::augment()).unwrap();
        assert!(p.user_text.contains("prohibiting pure rewriting"));
    }

    #[test]
    fn kind_mismatches() {
        let mut c = ConstraintSet::hard_negative();
        c.negative_degradation_modes.clear();
        assert!(matches!(
            build_prompt(SynthKind::HardNegative, &credit_card(), &c),
            Err(SynthesisError::ConstraintKindMismatch { .. })
        ));
        assert!(matches!(
            build_prompt(SynthKind::Paraphrase, &credit_card(), &ConstraintSet::augment()),
            Err(SynthesisError::ConstraintKindMismatch { .. })
        ));
        assert!(matches!(
            build_prompt(SynthKind::Augment, &credit_card(), &ConstraintSet::hard_negative()),
            Err(SynthesisError::ConstraintKindMismatch { .. })
        ));
    }

    #[test]
    fn every_active_flag_renders_a_clause() {
        let c = ConstraintSet::hard_negative();
        let clauses = c.clauses();
        // stay_in_field, length, keep_language, degradation, imitation
        assert_eq!(clauses.len(), 5);
        assert!(clauses.iter().any(|c| c.contains("different aspect of the same topic")));
    }

    #[test]
    fn prompt_source_round_trips() {
        let p = build_prompt(SynthKind::HardNegative, &credit_card(), &ConstraintSet::hard_negative())
            .unwrap()
            .with_expected_outputs(3);
        assert_eq!(p.expected_outputs, 3);
        assert!(p.user_text.contains("exactly 3 items"));
        assert_eq!(p.source_value()["query"], credit_card().query);
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(0.15), "15");
        assert_eq!(format_percent(0.125), "12.5");
    }
}
