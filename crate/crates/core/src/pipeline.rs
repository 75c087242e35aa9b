//! Staged, resumable runs: transform → synthesize → mine → dedup → filter →
//! plan → train → eval.
//!
//! Each stage writes into `work/<stage>/` and records the hashes of its
//! inputs, its config and its outputs in `work/manifest.json`. A stage whose
//! input and config hashes match the manifest, and whose outputs are still
//! on disk unchanged, is skipped.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{
    attach_instruction, read_jsonl, write_jsonl, InstructionRegistry, Provenance, RawRecord, RecordKind, ScoredPair,
    TaskKind, TrainingSample,
};
use crate::embed::ToyEmbedder;
use crate::hashing::{sha256_hex, sha256_hex_parts, stable_hash64};
use crate::mining::{
    dedup_by_key, goes_to_synthesis, mine_hard_negatives, quality_filter, EmbeddingScorer, MiningConfig, MiningError,
};
use crate::sampler::{
    compute_stage_one_plan, compute_two_stage_plan, DatasetMeta, LossFamily, RatioUnit, DEFAULT_ALPHA, DEFAULT_ETA,
};
use crate::synthesis::{
    apply_cls_policy, apply_nli_policy, apply_retrieval_policy, audit, augment, eligible_for_expansion,
    gen_hard_negatives, paraphrase, rewrite_sentence, run_batch, ConstraintSet, HttpClient, LlmClient, LlmClientConfig,
    NliPolicy, StubClient, SynthRecord, SynthStats, DEFAULT_EXPANSION_THRESHOLD,
};
use crate::trainer::{evaluate_recall, train, EvalItem, TrainConfig, TrainDataset, TrainRecords, TrainReport};
use crate::transform::{transform_cls, transform_records, ClsDatasetView, TransformOptions, DEFAULT_MAX_CHARS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Transform,
    Synthesize,
    Mine,
    Dedup,
    Filter,
    Plan,
    Train,
    Eval,
}

impl StageName {
    pub const ALL: [StageName; 8] = [
        StageName::Transform,
        StageName::Synthesize,
        StageName::Mine,
        StageName::Dedup,
        StageName::Filter,
        StageName::Plan,
        StageName::Train,
        StageName::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Transform => "transform",
            StageName::Synthesize => "synthesize",
            StageName::Mine => "mine",
            StageName::Dedup => "dedup",
            StageName::Filter => "filter",
            StageName::Plan => "plan",
            StageName::Train => "train",
            StageName::Eval => "eval",
        }
    }

    /// Stages whose `out.jsonl` carries the training records forward.
    fn emits_records(self) -> bool {
        self <= StageName::Filter
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: StageName, message: String },
}

fn stage_err(stage: StageName) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError::Stage { stage, message }
}

/// One line of a stage's `out.jsonl`: a sample or a scored pair, in the
/// same shape as `samples.jsonl` / `pairs.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Record {
    Sample(TrainingSample),
    Pair(ScoredPair),
}

impl Record {
    pub fn dataset(&self) -> &str {
        match self {
            Record::Sample(s) => &s.dataset,
            Record::Pair(p) => &p.dataset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub path: PathBuf,
    pub kind: RecordKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformStage {
    pub max_chars: usize,
    pub negatives_per_sample: usize,
    pub binarize_threshold: Option<f64>,
}

impl Default for TransformStage {
    fn default() -> Self {
        TransformStage {
            max_chars: DEFAULT_MAX_CHARS,
            negatives_per_sample: 4,
            binarize_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesizeStage {
    pub client: LlmClientConfig,
    /// share of retrieval samples of eligible datasets that get paraphrased
    pub paraphrase_fraction: f64,
    pub paraphrase_variants: usize,
    pub augment_fraction: f64,
    pub augment_variants: usize,
    /// share of retrieval samples whose negatives are generated rather than mined
    pub synth_fraction: f64,
    /// share of NLI and CLS sentences that get rewritten
    pub sentence_fraction: f64,
    pub expansion_threshold: usize,
    pub nli_duplication_probability: f64,
    /// stub only: probability of a deliberately invalid output
    pub fault_rate: f64,
}

impl Default for SynthesizeStage {
    fn default() -> Self {
        SynthesizeStage {
            client: LlmClientConfig::default(),
            paraphrase_fraction: 0.2,
            paraphrase_variants: 1,
            augment_fraction: 0.1,
            augment_variants: 1,
            synth_fraction: 0.3,
            sentence_fraction: 0.2,
            expansion_threshold: DEFAULT_EXPANSION_THRESHOLD,
            nli_duplication_probability: 1.0,
            fault_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterStage {
    pub threshold: f64,
}

impl Default for FilterStage {
    fn default() -> Self {
        FilterStage { threshold: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanStage {
    pub alpha: f64,
    pub eta: f64,
    pub ratio_unit: RatioUnit,
}

impl Default for PlanStage {
    fn default() -> Self {
        PlanStage {
            alpha: DEFAULT_ALPHA,
            eta: DEFAULT_ETA,
            ratio_unit: RatioUnit::Batches,
        }
    }
}

/// A whole run. Relative paths are resolved against the directory of the
/// config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub workspace: PathBuf,
    pub seed: u64,
    pub inputs: Vec<InputSpec>,
    pub instructions: Option<PathBuf>,
    pub eval_set: Option<PathBuf>,
    /// stages to run, in pipeline order
    pub stages: Vec<StageName>,
    pub transform: TransformStage,
    pub synthesize: SynthesizeStage,
    pub mine: MiningConfig,
    pub filter: FilterStage,
    pub plan: PlanStage,
    /// `alpha`, `eta`, `ratio_unit` and `seed` are taken from the plan
    /// stage and the global seed
    pub train: TrainConfig<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            workspace: PathBuf::from("work"),
            seed: 0,
            inputs: Vec::new(),
            instructions: None,
            eval_set: None,
            stages: StageName::ALL.to_vec(),
            transform: TransformStage::default(),
            synthesize: SynthesizeStage::default(),
            mine: MiningConfig::default(),
            filter: FilterStage::default(),
            plan: PlanStage::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stages.is_empty() {
            return Err(PipelineError::Config("no stages selected".into()));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PipelineError::Config(format!(
                "stages must be distinct and in pipeline order ({})",
                StageName::ALL.map(StageName::as_str).join(" → ")
            )));
        }
        if self.stages.contains(&StageName::Transform) && self.inputs.is_empty() {
            return Err(PipelineError::Config("transform needs at least one input".into()));
        }
        for f in [
            self.synthesize.paraphrase_fraction,
            self.synthesize.augment_fraction,
            self.synthesize.synth_fraction,
            self.synthesize.sentence_fraction,
            self.synthesize.fault_rate,
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(PipelineError::Config(format!("fraction {f} outside [0, 1]")));
            }
        }
        self.mine.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// The training config with plan-stage and global settings applied.
    pub fn train_config(&self) -> TrainConfig<f64> {
        TrainConfig {
            alpha: self.plan.alpha,
            eta: self.plan.eta,
            ratio_unit: self.plan.ratio_unit,
            seed: self.seed,
            ..self.train.clone()
        }
    }

    fn stage_config(&self, stage: StageName) -> Value {
        let c = match stage {
            StageName::Transform => json!({
                "inputs": self.inputs,
                "options": self.transform,
            }),
            StageName::Synthesize => json!({
                "options": self.synthesize,
                "negatives_per_query": self.mine.negatives_per_query,
                "negatives_per_sample": self.transform.negatives_per_sample,
            }),
            StageName::Mine => json!({
                "options": self.mine,
                "synth_fraction": self.synthesize.synth_fraction,
                "scorer": [self.train.vocab, self.train.dim],
            }),
            StageName::Dedup => json!({}),
            StageName::Filter => json!({
                "options": self.filter,
                "scorer": [self.train.vocab, self.train.dim],
            }),
            StageName::Plan => json!(self.plan),
            StageName::Train => json!(self.train_config()),
            StageName::Eval => json!({}),
        };
        json!({"stage": stage, "seed": self.seed, "config": c})
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// force the offline stub for synthesis
    pub stub: bool,
    /// rerun stages even if they are up to date
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub input_hash: String,
    pub config_hash: String,
    pub output_hash: String,
    /// input files, relative to the config directory where possible
    pub inputs: Vec<String>,
    /// output files, relative to the stage directory
    pub outputs: Vec<String>,
    pub records_in: usize,
    pub records_out: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<StageName, ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Manifest {
        fs::read_to_string(path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: StageName,
    pub status: StageStatus,
    pub records_out: usize,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub workspace: PathBuf,
    pub stages: Vec<StageOutcome>,
}

/// Final evaluation written to `work/eval/report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at1: f64,
    pub recall_at5: f64,
    pub items: usize,
    /// expected recall@1 of a random ranking
    pub random_baseline: f64,
    pub recall_at1_stage1: Option<f64>,
    /// synthetic texts in the audit trail that fail validation now
    pub audit_failures: Option<usize>,
    pub audited_records: Option<usize>,
}

struct StageResult {
    outputs: Vec<String>,
    records_in: usize,
    records_out: usize,
}

/// Executes a [`PipelineConfig`], reporting progress through `on_event`.
pub struct Pipeline<'a> {
    cfg: PipelineConfig,
    base: PathBuf,
    work: PathBuf,
    opts: RunOptions,
    on_event: Box<dyn FnMut(&Value) + 'a>,
}

impl<'a> Pipeline<'a> {
    /// `base` is the directory relative paths in `cfg` are resolved against.
    pub fn new(cfg: PipelineConfig, base: &Path, opts: RunOptions) -> Self {
        let work = base.join(&cfg.workspace);
        Pipeline {
            cfg,
            base: base.to_path_buf(),
            work,
            opts,
            on_event: Box::new(|_| {}),
        }
    }

    pub fn with_events(mut self, on_event: impl FnMut(&Value) + 'a) -> Self {
        self.on_event = Box::new(on_event);
        self
    }

    pub fn workspace(&self) -> &Path {
        &self.work
    }

    pub fn stage_dir(&self, stage: StageName) -> PathBuf {
        self.work.join(stage.as_str())
    }

    fn emit(&mut self, event: Value) {
        (self.on_event)(&event);
    }

    pub fn run(&mut self) -> Result<RunSummary, PipelineError> {
        self.cfg.validate()?;
        fs::create_dir_all(&self.work).map_err(|e| PipelineError::Config(format!("{}: {e}", self.work.display())))?;
        let manifest_path = self.work.join("manifest.json");
        let mut manifest = Manifest::load(&manifest_path);
        let mut outcomes = Vec::new();
        let stages = self.cfg.stages.clone();
        for stage in stages {
            let started = Instant::now();
            let inputs = self.stage_inputs(stage);
            let err = stage_err(stage);
            for p in &inputs {
                if !p.is_file() {
                    let e = err(format!("missing input {}", p.display()));
                    self.emit(json!({"event": "stage_failed", "stage": stage, "error": e.to_string()}));
                    return Err(e);
                }
            }
            let input_hash = hash_files(&inputs).map_err(&err)?;
            let config_hash = sha256_hex(self.cfg.stage_config(stage).to_string().as_bytes());
            let dir = self.stage_dir(stage);
            if !self.opts.force {
                if let Some(entry) = manifest.stages.get(&stage) {
                    let current = hash_files(&entry.outputs.iter().map(|o| dir.join(o)).collect::<Vec<_>>()).ok();
                    if entry.input_hash == input_hash
                        && entry.config_hash == config_hash
                        && current.as_deref() == Some(entry.output_hash.as_str())
                    {
                        self.emit(json!({"event": "stage_skipped", "stage": stage, "reason": "up to date"}));
                        outcomes.push(StageOutcome {
                            stage,
                            status: StageStatus::UpToDate,
                            records_out: entry.records_out,
                            elapsed_ms: 0,
                        });
                        continue;
                    }
                }
            }
            self.emit(json!({"event": "stage_started", "stage": stage}));
            fs::create_dir_all(&dir).map_err(|e| err(e.to_string()))?;
            let result = match self.run_stage(stage, &inputs) {
                Ok(r) => r,
                Err(message) => {
                    self.emit(json!({"event": "stage_failed", "stage": stage, "error": message}));
                    return Err(err(message));
                }
            };
            let outputs: Vec<PathBuf> = result.outputs.iter().map(|o| dir.join(o)).collect();
            let entry = ManifestEntry {
                input_hash,
                config_hash,
                output_hash: hash_files(&outputs).map_err(&err)?,
                inputs: inputs.iter().map(|p| self.display_path(p)).collect(),
                outputs: result.outputs,
                records_in: result.records_in,
                records_out: result.records_out,
            };
            manifest.stages.insert(stage, entry);
            write_json(&manifest_path, &manifest).map_err(&err)?;
            let elapsed_ms = started.elapsed().as_millis() as u64;
            self.emit(json!({
                "event": "stage_finished",
                "stage": stage,
                "records_in": result.records_in,
                "records_out": result.records_out,
                "elapsed_ms": elapsed_ms,
            }));
            outcomes.push(StageOutcome {
                stage,
                status: StageStatus::Ran,
                records_out: result.records_out,
                elapsed_ms,
            });
        }
        Ok(RunSummary {
            workspace: self.work.clone(),
            stages: outcomes,
        })
    }

    fn display_path(&self, p: &Path) -> String {
        p.strip_prefix(&self.base).unwrap_or(p).display().to_string()
    }

    /// The most recent record-emitting stage before `stage` in this run,
    /// falling back to the pipeline order when stages are run piecemeal.
    fn records_from(&self, stage: StageName) -> PathBuf {
        let prev = self
            .cfg
            .stages
            .iter()
            .rev()
            .copied()
            .find(|s| *s < stage && s.emits_records())
            .or_else(|| {
                StageName::ALL
                    .iter()
                    .rev()
                    .copied()
                    .find(|s| *s < stage && s.emits_records())
            })
            .unwrap_or(StageName::Transform);
        self.stage_dir(prev).join("out.jsonl")
    }

    fn stage_inputs(&self, stage: StageName) -> Vec<PathBuf> {
        let mut inputs = Vec::new();
        match stage {
            StageName::Transform => {
                inputs.extend(self.cfg.inputs.iter().map(|i| self.base.join(&i.path)));
                inputs.extend(self.cfg.instructions.iter().map(|p| self.base.join(p)));
            }
            StageName::Plan => inputs.push(self.records_from(stage)),
            StageName::Train => {
                inputs.push(self.records_from(stage));
                inputs.push(self.stage_dir(StageName::Plan).join("datasets.json"));
                inputs.extend(self.cfg.eval_set.iter().map(|p| self.base.join(p)));
            }
            StageName::Eval => {
                inputs.push(self.stage_dir(StageName::Train).join("model.bin"));
                inputs.push(self.stage_dir(StageName::Train).join("report.json"));
                inputs.extend(self.cfg.eval_set.iter().map(|p| self.base.join(p)));
                if self.cfg.stages.contains(&StageName::Synthesize) {
                    inputs.push(self.stage_dir(StageName::Synthesize).join("audit.jsonl"));
                }
            }
            _ => inputs.push(self.records_from(stage)),
        }
        inputs
    }

    fn run_stage(&mut self, stage: StageName, inputs: &[PathBuf]) -> Result<StageResult, String> {
        let dir = self.stage_dir(stage);
        match stage {
            StageName::Transform => self.transform(&dir),
            StageName::Synthesize => self.synthesize(&inputs[0], &dir),
            StageName::Mine => self.mine(&inputs[0], &dir),
            StageName::Dedup => dedup_stage(&inputs[0], &dir),
            StageName::Filter => self.filter(&inputs[0], &dir),
            StageName::Plan => self.plan(&inputs[0], &dir),
            StageName::Train => self.train(&inputs[0], &inputs[1], &dir),
            StageName::Eval => self.eval(&dir),
        }
    }

    fn transform(&mut self, dir: &Path) -> Result<StageResult, String> {
        let mut registry = InstructionRegistry::builtin();
        if let Some(p) = &self.cfg.instructions {
            registry.extend(InstructionRegistry::load(&self.base.join(p)).map_err(|e| e.to_string())?);
        }
        let opts = TransformOptions {
            max_chars: self.cfg.transform.max_chars,
            negatives_per_sample: self.cfg.transform.negatives_per_sample,
            seed: self.cfg.seed,
            binarize_threshold: self.cfg.transform.binarize_threshold,
        };
        let mut out = Vec::new();
        let mut records_in = 0;
        let mut missing = HashSet::new();
        for input in &self.cfg.inputs {
            let path = self.base.join(&input.path);
            let records: Vec<RawRecord> = read_jsonl(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            records_in += records.len();
            for r in &records {
                r.validate().map_err(|e| format!("{}: {e}", path.display()))?;
            }
            let t = transform_records(input.kind, &records, &opts).map_err(|e| format!("{}: {e}", path.display()))?;
            for s in t.samples {
                let (s, warning) = attach_instruction(s, &registry);
                if let Some(w) = warning {
                    missing.insert(w.dataset);
                }
                out.push(Record::Sample(s));
            }
            out.extend(t.pairs.into_iter().map(Record::Pair));
        }
        let mut missing: Vec<String> = missing.into_iter().collect();
        missing.sort();
        for dataset in missing {
            self.emit(json!({"event": "missing_instruction", "stage": "transform", "dataset": dataset}));
        }
        write_records(dir, &out)?;
        Ok(StageResult {
            outputs: vec!["out.jsonl".into()],
            records_in,
            records_out: out.len(),
        })
    }

    fn client(&self) -> Result<Box<dyn LlmClient>, String> {
        let s = &self.cfg.synthesize;
        if s.client.offline_stub || self.opts.stub {
            Ok(Box::new(StubClient::new(self.cfg.seed).with_fault_rate(s.fault_rate)))
        } else {
            let http = HttpClient::new(s.client.clone())
                .require_key()
                .map_err(|e| e.to_string())?;
            Ok(Box::new(http))
        }
    }

    fn synthesize(&mut self, input: &Path, dir: &Path) -> Result<StageResult, String> {
        let records = read_records(input)?;
        let records_in = records.len();
        let client = self.client()?;
        let s = self.cfg.synthesize.clone();
        let parallel = s.client.max_parallel_requests;
        let negs_wanted = self.cfg.mine.negatives_per_query;
        let mut audit_trail: Vec<SynthRecord> = Vec::new();
        let mut stats: BTreeMap<&str, SynthStats> = BTreeMap::new();
        let mut out = Vec::with_capacity(records.len());

        for (dataset, group) in group_by_dataset(records) {
            let eligible = eligible_for_expansion(group.len(), s.expansion_threshold);
            let (samples, pairs) = split_records(group);
            let (retrieval, cls): (Vec<TrainingSample>, Vec<TrainingSample>) =
                samples.into_iter().partition(|x| x.task != TaskKind::Cls);

            if !retrieval.is_empty() {
                let mut generated = Vec::new();
                if eligible {
                    let pick = |frac: f64, salt: &str| -> Vec<TrainingSample> {
                        retrieval
                            .iter()
                            .filter(|x| x.task == TaskKind::Retrieval && selected(&x.query, salt, frac))
                            .cloned()
                            .collect()
                    };
                    let c = ConstraintSet::paraphrase();
                    let (res, st) = run_batch(&pick(s.paraphrase_fraction, "paraphrase"), parallel, |x| {
                        paraphrase(x, client.as_ref(), &c, s.paraphrase_variants)
                    })
                    .map_err(|e| e.to_string())?;
                    add_stats(&mut stats, "paraphrase", st);
                    for r in res {
                        audit_trail.extend(r.records);
                        generated.extend(r.items);
                    }
                    let c = ConstraintSet::augment();
                    let (res, st) = run_batch(&pick(s.augment_fraction, "augment"), parallel, |x| {
                        augment(x, client.as_ref(), &c, s.augment_variants)
                    })
                    .map_err(|e| e.to_string())?;
                    add_stats(&mut stats, "augment", st);
                    for r in res {
                        audit_trail.extend(r.records);
                        generated.extend(r.items);
                    }
                }
                let mut all = apply_retrieval_policy(retrieval, generated);

                // the synthesis side of the synthesized/mined negative split
                let targets: Vec<usize> = (0..all.len())
                    .filter(|&i| {
                        all[i].task == TaskKind::Retrieval
                            && all[i].negatives.len() < negs_wanted
                            && goes_to_synthesis(&all[i].query, s.synth_fraction)
                    })
                    .collect();
                let c = ConstraintSet::hard_negative();
                let (res, st) = run_batch(&targets, parallel, |&i| {
                    gen_hard_negatives(&all[i], client.as_ref(), &c, negs_wanted - all[i].negatives.len())
                })
                .map_err(|e| e.to_string())?;
                add_stats(&mut stats, "hard_negative", st);
                for (&i, r) in targets.iter().zip(res) {
                    if r.items.is_empty() {
                        continue;
                    }
                    audit_trail.extend(r.records);
                    let sample = &mut all[i];
                    for neg in r.items {
                        if !sample.negatives.contains(&neg) {
                            sample.negatives.push(neg);
                        }
                    }
                    if sample.provenance == Provenance::Original {
                        sample.provenance = Provenance::SynthNegative;
                    }
                }
                out.extend(all.into_iter().map(Record::Sample));
            }

            if !cls.is_empty() {
                let cls = if eligible {
                    let view = cls_view_from_samples(&dataset, &cls);
                    let chosen: Vec<(usize, String)> = view
                        .entries()
                        .iter()
                        .enumerate()
                        .filter(|(_, (text, _))| selected(text, "sentence", s.sentence_fraction))
                        .map(|(i, (text, _))| (i, text.clone()))
                        .collect();
                    let c = ConstraintSet::paraphrase();
                    let (res, st) = run_batch(&chosen, parallel, |(_, text)| {
                        rewrite_sentence(text, client.as_ref(), &c, 1)
                    })
                    .map_err(|e| e.to_string())?;
                    add_stats(&mut stats, "sentence", st);
                    let mut rewrites = Vec::new();
                    for ((entry, _), r) in chosen.iter().zip(res) {
                        audit_trail.extend(r.records);
                        rewrites.extend(r.items.into_iter().map(|t| (*entry, t)));
                    }
                    let rewritten: HashSet<String> = rewrites.iter().map(|(_, t)| t.clone()).collect();
                    let grown = apply_cls_policy(&view, &rewrites);
                    let instruction = cls[0].instruction.clone();
                    transform_cls(&grown, self.cfg.transform.negatives_per_sample, self.cfg.seed)
                        .map_err(|e| e.to_string())?
                        .into_iter()
                        .map(|mut x| {
                            x.instruction = instruction.clone();
                            if rewritten.contains(&x.query) {
                                x.provenance = Provenance::Paraphrased;
                            }
                            x
                        })
                        .collect()
                } else {
                    cls
                };
                out.extend(cls.into_iter().map(Record::Sample));
            }

            if !pairs.is_empty() {
                let pairs = if eligible {
                    let mut seen = HashSet::new();
                    let sentences: Vec<String> = pairs
                        .iter()
                        .flat_map(|p| [&p.text_a, &p.text_b])
                        .filter(|t| seen.insert(t.as_str()) && selected(t, "sentence", s.sentence_fraction))
                        .cloned()
                        .collect();
                    let c = ConstraintSet::paraphrase();
                    let (res, st) = run_batch(&sentences, parallel, |text| {
                        rewrite_sentence(text, client.as_ref(), &c, 1)
                    })
                    .map_err(|e| e.to_string())?;
                    add_stats(&mut stats, "sentence", st);
                    let mut rewrites = Vec::new();
                    for (text, r) in sentences.iter().zip(res) {
                        audit_trail.extend(r.records);
                        rewrites.extend(r.items.into_iter().map(|t| (text.clone(), t)));
                    }
                    let policy = NliPolicy {
                        duplication_probability: s.nli_duplication_probability,
                        seed: self.cfg.seed ^ stable_hash64(&[dataset.as_bytes()]),
                    };
                    apply_nli_policy(pairs, &rewrites, &policy)
                } else {
                    pairs
                };
                out.extend(pairs.into_iter().map(Record::Pair));
            }
        }

        write_records(dir, &out)?;
        write_jsonl(&dir.join("audit.jsonl"), &audit_trail).map_err(|e| e.to_string())?;
        write_json(&dir.join("stats.json"), &stats)?;
        for (op, st) in &stats {
            self.emit(json!({"event": "synthesis", "op": op, "stats": st}));
        }
        Ok(StageResult {
            outputs: vec!["out.jsonl".into(), "audit.jsonl".into(), "stats.json".into()],
            records_in,
            records_out: out.len(),
        })
    }

    fn scorer_model(&self) -> Result<ToyEmbedder<f64>, String> {
        ToyEmbedder::new(self.cfg.train.vocab, self.cfg.train.dim, self.cfg.seed).map_err(|e| e.to_string())
    }

    fn mine(&mut self, input: &Path, dir: &Path) -> Result<StageResult, String> {
        let records = read_records(input)?;
        let records_in = records.len();
        let model = self.scorer_model()?;
        let scorer = EmbeddingScorer::new(&model);
        let mut corpora: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for r in &records {
            if let Record::Sample(x) = r {
                if x.task == TaskKind::Retrieval {
                    let corpus = corpora.entry(x.dataset.clone()).or_default();
                    if !corpus.contains(&x.positive) {
                        corpus.push(x.positive.clone());
                    }
                }
            }
        }
        let (mut mined, mut too_small) = (0usize, 0usize);
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            let Record::Sample(x) = r else {
                out.push(r);
                continue;
            };
            if x.task != TaskKind::Retrieval || goes_to_synthesis(&x.query, self.cfg.synthesize.synth_fraction) {
                out.push(Record::Sample(x));
                continue;
            }
            match mine_hard_negatives(&x, &corpora[&x.dataset], &scorer, &self.cfg.mine, self.cfg.seed) {
                Ok(m) => {
                    mined += m.negatives.len() - x.negatives.len();
                    out.push(Record::Sample(m));
                }
                Err(MiningError::CorpusTooSmall { .. }) => {
                    too_small += 1;
                    out.push(Record::Sample(x));
                }
                Err(e) => return Err(e.to_string()),
            }
        }
        self.emit(json!({"event": "mining", "negatives_added": mined, "corpus_too_small": too_small}));
        write_records(dir, &out)?;
        Ok(StageResult {
            outputs: vec!["out.jsonl".into()],
            records_in,
            records_out: out.len(),
        })
    }

    fn filter(&mut self, input: &Path, dir: &Path) -> Result<StageResult, String> {
        let records = read_records(input)?;
        let records_in = records.len();
        let model = self.scorer_model()?;
        let scorer = EmbeddingScorer::new(&model);
        let retrieval: Vec<TrainingSample> = records
            .iter()
            .filter_map(|r| match r {
                Record::Sample(x) if x.task == TaskKind::Retrieval => Some(x.clone()),
                _ => None,
            })
            .collect();
        let (kept, dropped) =
            quality_filter(retrieval, &scorer, self.cfg.filter.threshold).map_err(|e| e.to_string())?;
        // kept is an order-preserving subsequence of the retrieval samples
        let mut kept = kept.into_iter().peekable();
        let out: Vec<Record> = records
            .into_iter()
            .filter(|r| match r {
                Record::Sample(x) if x.task == TaskKind::Retrieval => {
                    if kept.peek() == Some(x) {
                        kept.next();
                        true
                    } else {
                        false
                    }
                }
                _ => true,
            })
            .collect();
        self.emit(json!({"event": "filter", "dropped": dropped, "threshold": self.cfg.filter.threshold}));
        write_records(dir, &out)?;
        Ok(StageResult {
            outputs: vec!["out.jsonl".into()],
            records_in,
            records_out: out.len(),
        })
    }

    fn plan(&mut self, input: &Path, dir: &Path) -> Result<StageResult, String> {
        let records = read_records(input)?;
        // relative to datasets.json, so the workspace can move
        let rel = Path::new("..").join(input.strip_prefix(&self.work).unwrap_or(input));
        let metas = dataset_metas(&records, &rel)?;
        write_json(&dir.join("datasets.json"), &metas)?;
        let p = &self.cfg.plan;
        let one = compute_stage_one_plan(&metas, p.alpha)
            .map_err(|e| e.to_string())?
            .with_ratio_unit(p.ratio_unit);
        write_json(&dir.join("plan_stage1.json"), &one)?;
        let mut outputs = vec!["datasets.json".to_string(), "plan_stage1.json".to_string()];
        if metas.iter().any(|m| !m.is_retrieval) {
            let two = compute_two_stage_plan(&metas, p.alpha, p.eta)
                .map_err(|e| e.to_string())?
                .with_ratio_unit(p.ratio_unit);
            write_json(&dir.join("plan_stage2.json"), &two)?;
            outputs.push("plan_stage2.json".into());
        }
        Ok(StageResult {
            outputs,
            records_in: records.len(),
            records_out: metas.len(),
        })
    }

    fn train(&mut self, records_path: &Path, datasets_path: &Path, dir: &Path) -> Result<StageResult, String> {
        let records = read_records(records_path)?;
        let metas: Vec<DatasetMeta> =
            serde_json::from_str(&fs::read_to_string(datasets_path).map_err(|e| e.to_string())?)
                .map_err(|e| format!("{}: {e}", datasets_path.display()))?;
        let data = train_datasets(records, &metas)?;
        let eval = self.load_eval()?;
        let cfg = self.cfg.train_config();
        let (model, mut report) = train(&cfg, &data, eval.as_deref()).map_err(|e| e.to_string())?;
        let wall = report.wall_clock_ms.take();
        model.save(&dir.join("model.bin")).map_err(|e| e.to_string())?;
        write_json(&dir.join("report.json"), &report)?;
        self.emit(json!({
            "event": "trained",
            "steps": report.stage1.len() + report.stage2.len(),
            "wall_clock_ms": wall,
            "recall_at1": report.recall.map(|r| r.at1),
        }));
        Ok(StageResult {
            outputs: vec!["model.bin".into(), "report.json".into()],
            records_in: data.iter().map(|d| d.records.len()).sum(),
            records_out: report.stage1.len() + report.stage2.len(),
        })
    }

    fn load_eval(&self) -> Result<Option<Vec<EvalItem>>, String> {
        match &self.cfg.eval_set {
            Some(p) => {
                let path = self.base.join(p);
                read_jsonl(&path)
                    .map(Some)
                    .map_err(|e| format!("{}: {e}", path.display()))
            }
            None => Ok(None),
        }
    }

    fn eval(&mut self, dir: &Path) -> Result<StageResult, String> {
        let train_dir = self.stage_dir(StageName::Train);
        let model = ToyEmbedder::<f64>::load(&train_dir.join("model.bin")).map_err(|e| e.to_string())?;
        let train_report: TrainReport =
            serde_json::from_str(&fs::read_to_string(train_dir.join("report.json")).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let items = self.load_eval()?.ok_or("eval needs an eval_set")?;
        let recall = evaluate_recall(&model, &items).map_err(|e| e.to_string())?;
        let mean_candidates =
            items.iter().map(|i| i.distractors.len() as f64 + 1.0).sum::<f64>() / items.len().max(1) as f64;
        let (audit_failures, audited_records) = if self.cfg.stages.contains(&StageName::Synthesize) {
            let trail: Vec<SynthRecord> =
                read_jsonl(&self.stage_dir(StageName::Synthesize).join("audit.jsonl")).map_err(|e| e.to_string())?;
            (Some(audit(&trail, ConstraintSet::for_kind).len()), Some(trail.len()))
        } else {
            (None, None)
        };
        let report = EvalReport {
            recall_at1: recall.at1,
            recall_at5: recall.at5,
            items: recall.items,
            random_baseline: 1.0 / mean_candidates,
            recall_at1_stage1: train_report.recall_stage1.map(|r| r.at1),
            audit_failures,
            audited_records,
        };
        write_json(&dir.join("report.json"), &report)?;
        Ok(StageResult {
            outputs: vec!["report.json".into()],
            records_in: items.len(),
            records_out: 1,
        })
    }
}

/// Hash-based selection of roughly `fraction` of keys, independent per salt.
fn selected(key: &str, salt: &str, fraction: f64) -> bool {
    let h = stable_hash64(&[salt.as_bytes(), key.as_bytes()]);
    (h as f64 / u64::MAX as f64) < fraction
}

fn add_stats(into: &mut BTreeMap<&'static str, SynthStats>, op: &'static str, st: SynthStats) {
    let e = into.entry(op).or_default();
    e.sources += st.sources;
    e.accepted += st.accepted;
    e.rejected += st.rejected;
    e.degenerate += st.degenerate;
    e.api_errors += st.api_errors;
}

/// Records grouped by dataset, datasets in first-seen order.
fn group_by_dataset(records: Vec<Record>) -> Vec<(String, Vec<Record>)> {
    let mut groups: Vec<(String, Vec<Record>)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        let i = *index.entry(r.dataset().to_string()).or_insert_with(|| {
            groups.push((r.dataset().to_string(), Vec::new()));
            groups.len() - 1
        });
        groups[i].1.push(r);
    }
    groups
}

fn split_records(records: Vec<Record>) -> (Vec<TrainingSample>, Vec<ScoredPair>) {
    let mut samples = Vec::new();
    let mut pairs = Vec::new();
    for r in records {
        match r {
            Record::Sample(s) => samples.push(s),
            Record::Pair(p) => pairs.push(p),
        }
    }
    (samples, pairs)
}

/// Rebuild the labeled-text view behind example-based CLS samples: one
/// entry per distinct (query, label), in order of appearance.
fn cls_view_from_samples(dataset: &str, samples: &[TrainingSample]) -> ClsDatasetView {
    let mut seen = HashSet::new();
    let mut view = ClsDatasetView::new(dataset);
    for s in samples {
        let label = s.class_label.clone().unwrap_or_default();
        if seen.insert((s.query.clone(), label.clone())) {
            view.push(s.query.clone(), label);
        }
    }
    view
}

/// One [`DatasetMeta`] per dataset, in first-seen order. Datasets of
/// retrieval samples are the retrieval side.
pub fn dataset_metas(records: &[Record], path: &Path) -> Result<Vec<DatasetMeta>, String> {
    let mut metas: Vec<DatasetMeta> = Vec::new();
    for r in records {
        let (is_retrieval, loss) = match r {
            Record::Sample(s) => (s.task == TaskKind::Retrieval, LossFamily::Infonce),
            Record::Pair(_) => (false, LossFamily::Cosent),
        };
        match metas.iter_mut().find(|m| m.name == r.dataset()) {
            Some(m) => {
                if m.is_retrieval != is_retrieval || m.loss != loss {
                    return Err(format!("dataset {:?} mixes record types", m.name));
                }
                m.size += 1;
            }
            None => {
                let mut m = DatasetMeta::new(r.dataset(), 1, is_retrieval, loss);
                m.path = path.to_path_buf();
                metas.push(m);
            }
        }
    }
    Ok(metas)
}

/// Split records into per-dataset training sets ordered as in `metas`.
pub fn train_datasets(records: Vec<Record>, metas: &[DatasetMeta]) -> Result<Vec<TrainDataset>, String> {
    let mut groups: BTreeMap<String, Vec<Record>> = group_by_dataset(records).into_iter().collect();
    let mut out = Vec::with_capacity(metas.len());
    for m in metas {
        let group = groups
            .remove(&m.name)
            .ok_or_else(|| format!("dataset {:?} has no records", m.name))?;
        let (samples, pairs) = split_records(group);
        let records = match m.loss {
            LossFamily::Infonce if pairs.is_empty() => TrainRecords::Samples(samples),
            LossFamily::Cosent if samples.is_empty() => TrainRecords::Pairs(pairs),
            _ => return Err(format!("dataset {:?} does not match its loss", m.name)),
        };
        if records.len() as u64 != m.size {
            return Err(format!(
                "dataset {:?}: manifest says {} records, found {}",
                m.name,
                m.size,
                records.len()
            ));
        }
        out.push(TrainDataset {
            name: m.name.clone(),
            is_retrieval: m.is_retrieval,
            records,
        });
    }
    Ok(out)
}

fn dedup_stage(input: &Path, dir: &Path) -> Result<StageResult, String> {
    let records = read_records(input)?;
    let records_in = records.len();
    #[derive(PartialEq, Eq, Hash)]
    enum Key {
        Sample(String, String),
        Pair(String, String, String),
    }
    let out: Vec<Record> = dedup_by_key(records, |r: &Record| match r {
        Record::Sample(s) => {
            let (q, p) = crate::mining::dedup_key(s);
            Key::Sample(q, p)
        }
        Record::Pair(p) => Key::Pair(p.dataset.clone(), p.text_a.clone(), p.text_b.clone()),
    })
    .collect();
    write_records(dir, &out)?;
    Ok(StageResult {
        outputs: vec!["out.jsonl".into()],
        records_in,
        records_out: out.len(),
    })
}

pub fn read_records(path: &Path) -> Result<Vec<Record>, String> {
    read_jsonl(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_records(dir: &Path, records: &[Record]) -> Result<(), String> {
    write_jsonl(&dir.join("out.jsonl"), records).map_err(|e| e.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Hash of the named files' contents, in order.
fn hash_files(paths: &[PathBuf]) -> Result<String, String> {
    let mut contents = Vec::with_capacity(paths.len());
    for p in paths {
        contents.push(fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?);
    }
    let parts: Vec<&[u8]> = contents.iter().map(Vec::as_slice).collect();
    Ok(sha256_hex_parts(&parts))
}
