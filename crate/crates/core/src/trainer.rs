//! Two-stage training of the toy embedder and retrieval evaluation.
//!
//! Stage one samples retrieval datasets only; stage two samples everything
//! under the η plan. Every step embeds the batch's texts, runs the loss
//! kernel matching the dataset, backpropagates through mean pooling and
//! takes a plain gradient step with linear warm-up.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ScoredPair, TaskKind, TrainingSample};
use crate::embed::{with_instruction, EmbedError, Pooled, TableGrad, ToyEmbedder, DEFAULT_DIM, DEFAULT_VOCAB};
use crate::losses::{
    cls_loss, cosent_loss, retrieval_loss, EmbeddedBatch, LossConfig, LossError, LossKind, ScoredPairBatch,
};
use crate::sampler::{
    compute_stage_one_plan, compute_two_stage_plan, next_batch_with, BatchSizes, DatasetMeta, LossFamily, RatioUnit,
    SamplerError, SamplerState, SamplingPlan, Stage, DEFAULT_ALPHA, DEFAULT_ETA,
};
use crate::scalar::{dot, Scalar};
use crate::transform::truncate_chars;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset {name:?}: {reason}")]
    InvalidDataset { name: String, reason: String },
    #[error("eval item {index} has {have} distractors, need at least 5")]
    TooFewDistractors { index: usize, have: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct TrainConfig<T> {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr1: T,
    pub lr2: T,
    pub warmup_steps: usize,
    /// restart the warm-up at the beginning of stage two
    pub stage2_warmup: bool,
    pub tau: T,
    pub eta: T,
    pub alpha: T,
    pub ratio_unit: RatioUnit,
    pub batch_sizes: BatchSizes,
    /// negatives kept per instance; extra ones are dropped
    pub max_negatives: usize,
    /// decoupled, applied to the rows touched by a step
    pub weight_decay: T,
    pub query_max_chars: usize,
    pub passage_max_chars: usize,
    pub include_query_query: bool,
    pub cls_masking: bool,
    pub vocab: usize,
    pub dim: usize,
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 3200,
            stage2_steps: 800,
            lr1: T::lit(1e-2),
            lr2: T::lit(1e-2 * 2.0 / 3.0),
            warmup_steps: 30,
            stage2_warmup: true,
            tau: T::lit(crate::losses::DEFAULT_TEMPERATURE),
            eta: T::lit(DEFAULT_ETA),
            alpha: T::lit(DEFAULT_ALPHA),
            ratio_unit: RatioUnit::Batches,
            batch_sizes: BatchSizes {
                infonce: 32,
                cosent: 96,
            },
            max_negatives: 4,
            weight_decay: T::zero(),
            query_max_chars: 256,
            passage_max_chars: 1536,
            include_query_query: true,
            cls_masking: true,
            vocab: DEFAULT_VOCAB,
            dim: DEFAULT_DIM,
            seed: 0,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr1 > T::zero() && self.lr2 > T::zero()) {
            return bad("learning rates must be positive");
        }
        if !(self.tau > T::zero()) {
            return bad("tau must be positive");
        }
        if self.weight_decay < T::zero() {
            return bad("weight decay must be non-negative");
        }
        if self.query_max_chars == 0 || self.passage_max_chars == 0 {
            return bad("truncation limits must be positive");
        }
        self.batch_sizes.validate()?;
        Ok(())
    }

    fn loss_config(&self) -> LossConfig<T> {
        LossConfig {
            temperature: self.tau,
            include_query_query: self.include_query_query,
            cls_masking: self.cls_masking,
            ..LossConfig::default()
        }
    }

    /// Learning rate at `step` (0-based) of a stage with base rate `base`.
    pub fn lr_at(&self, base: T, step: usize, warm: bool) -> T {
        if !warm || self.warmup_steps == 0 || step >= self.warmup_steps {
            return base;
        }
        base * T::from_usize(step + 1).expect("step fits") / T::from_usize(self.warmup_steps).expect("fits")
    }
}

/// Records of one dataset, in sampler index order.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainRecords {
    Samples(Vec<TrainingSample>),
    Pairs(Vec<ScoredPair>),
}

impl TrainRecords {
    pub fn len(&self) -> usize {
        match self {
            TrainRecords::Samples(s) => s.len(),
            TrainRecords::Pairs(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainDataset {
    pub name: String,
    pub is_retrieval: bool,
    pub records: TrainRecords,
}

impl TrainDataset {
    pub fn meta(&self) -> DatasetMeta {
        let loss = match self.records {
            TrainRecords::Samples(_) => LossFamily::Infonce,
            TrainRecords::Pairs(_) => LossFamily::Cosent,
        };
        DatasetMeta::new(&self.name, self.records.len() as u64, self.is_retrieval, loss)
    }
}

/// One held-out retrieval query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub query: String,
    #[serde(default)]
    pub instruction: String,
    #[serde(rename = "pos")]
    pub positive: String,
    pub distractors: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub at1: f64,
    pub at5: f64,
    pub items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub dataset: String,
    pub kind: LossKind,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage1: Vec<StepRecord>,
    pub stage2: Vec<StepRecord>,
    /// held-out recall after stage one and at the end
    pub recall_stage1: Option<Recall>,
    pub recall: Option<Recall>,
    /// instances dropped because a text had no tokens
    pub skipped_instances: usize,
    /// left out of saved reports so that they stay reproducible
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

impl TrainReport {
    pub fn losses(&self, stage: Stage) -> Vec<f64> {
        let steps = match stage {
            Stage::One => &self.stage1,
            Stage::Two => &self.stage2,
        };
        steps.iter().map(|s| s.loss).collect()
    }
}

/// Train a freshly initialised embedder (see [`train_from`]).
pub fn train<T: Scalar>(
    cfg: &TrainConfig<T>,
    data: &[TrainDataset],
    eval: Option<&[EvalItem]>,
) -> Result<(ToyEmbedder<T>, TrainReport), TrainError> {
    let model = ToyEmbedder::new(cfg.vocab, cfg.dim, cfg.seed)?;
    train_from(model, cfg, data, eval)
}

/// Run both stages starting from `model`. Stage two needs retrieval and
/// non-retrieval data unless `stage2_steps` is 0.
pub fn train_from<T: Scalar>(
    mut model: ToyEmbedder<T>,
    cfg: &TrainConfig<T>,
    data: &[TrainDataset],
    eval: Option<&[EvalItem]>,
) -> Result<(ToyEmbedder<T>, TrainReport), TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let metas: Vec<DatasetMeta> = data.iter().map(TrainDataset::meta).collect();
    for (d, m) in data.iter().zip(&metas) {
        if d.is_retrieval && m.loss != LossFamily::Infonce {
            return Err(SamplerError::LossMismatch(d.name.clone()).into());
        }
    }
    let mut state = SamplerState::new(cfg.seed);
    let mut report = TrainReport {
        stage1: Vec::with_capacity(cfg.stage1_steps),
        stage2: Vec::with_capacity(cfg.stage2_steps),
        recall_stage1: None,
        recall: None,
        skipped_instances: 0,
        wall_clock_ms: None,
    };

    if cfg.stage1_steps > 0 {
        let plan = compute_stage_one_plan(&metas, cfg.alpha)?.with_ratio_unit(cfg.ratio_unit);
        let mut stage = StageRun {
            cfg,
            data,
            plan: &plan,
            base_lr: cfg.lr1,
            warm: true,
        };
        report.stage1 = stage.run(&mut model, &mut state, cfg.stage1_steps, &mut report.skipped_instances)?;
    }
    if let Some(items) = eval {
        report.recall_stage1 = Some(evaluate_recall(&model, items)?);
    }
    if cfg.stage2_steps > 0 {
        let plan = compute_two_stage_plan(&metas, cfg.alpha, cfg.eta)?.with_ratio_unit(cfg.ratio_unit);
        let mut stage = StageRun {
            cfg,
            data,
            plan: &plan,
            base_lr: cfg.lr2,
            warm: cfg.stage2_warmup,
        };
        report.stage2 = stage.run(&mut model, &mut state, cfg.stage2_steps, &mut report.skipped_instances)?;
    }
    if let Some(items) = eval {
        report.recall = Some(evaluate_recall(&model, items)?);
    }
    report.wall_clock_ms = Some(started.elapsed().as_millis() as u64);
    Ok((model, report))
}

struct StageRun<'a, T> {
    cfg: &'a TrainConfig<T>,
    data: &'a [TrainDataset],
    plan: &'a SamplingPlan<T>,
    base_lr: T,
    warm: bool,
}

impl<T: Scalar> StageRun<'_, T> {
    fn run(
        &mut self,
        model: &mut ToyEmbedder<T>,
        state: &mut SamplerState,
        steps: usize,
        skipped: &mut usize,
    ) -> Result<Vec<StepRecord>, TrainError> {
        let probs = self.plan.batch_probabilities(&self.cfg.batch_sizes);
        let loss_cfg = self.cfg.loss_config();
        let mut out = Vec::with_capacity(steps);
        for step in 0..steps {
            let spec = next_batch_with(self.plan, &probs, state, &self.cfg.batch_sizes);
            let dataset = self
                .data
                .iter()
                .find(|d| d.name == spec.dataset)
                .expect("plan entries come from the datasets");
            let mut grad = TableGrad::default();
            let (kind, loss) = match &dataset.records {
                TrainRecords::Samples(samples) => {
                    let batch: Vec<&TrainingSample> = spec.indices.iter().map(|&i| &samples[i as usize]).collect();
                    infonce_step(model, self.cfg, &loss_cfg, &batch, &mut grad, skipped)?
                }
                TrainRecords::Pairs(pairs) => {
                    let batch: Vec<&ScoredPair> = spec.indices.iter().map(|&i| &pairs[i as usize]).collect();
                    (
                        LossKind::Cosent,
                        cosent_step(model, &loss_cfg, &batch, &mut grad, skipped)?,
                    )
                }
            };
            let lr = self.cfg.lr_at(self.base_lr, step, self.warm);
            model.apply(&grad, lr, self.cfg.weight_decay);
            out.push(StepRecord {
                dataset: spec.dataset,
                kind,
                loss: loss.to_f64_lossy(),
            });
        }
        Ok(out)
    }
}

/// Forward passes of one InfoNCE instance.
struct Instance<T> {
    query: Pooled<T>,
    positive: Pooled<T>,
    negatives: Vec<Pooled<T>>,
    label: Option<String>,
    neg_labels: Vec<String>,
}

fn embed_instance<T: Scalar>(model: &ToyEmbedder<T>, cfg: &TrainConfig<T>, s: &TrainingSample) -> Option<Instance<T>> {
    let query = truncate_chars(&s.query, cfg.query_max_chars);
    let query = model.forward(&with_instruction(&s.instruction, query)).ok()?;
    let positive = model.forward(truncate_chars(&s.positive, cfg.passage_max_chars)).ok()?;
    let mut negatives = Vec::new();
    let mut neg_labels = Vec::new();
    for (k, n) in s.negatives.iter().take(cfg.max_negatives).enumerate() {
        // an untokenizable negative is dropped rather than the whole instance
        if let Ok(p) = model.forward(truncate_chars(n, cfg.passage_max_chars)) {
            negatives.push(p);
            if let Some(labels) = &s.neg_class_labels {
                neg_labels.push(labels[k].clone());
            }
        }
    }
    Some(Instance {
        query,
        positive,
        negatives,
        label: s.class_label.clone(),
        neg_labels,
    })
}

fn infonce_step<T: Scalar>(
    model: &ToyEmbedder<T>,
    cfg: &TrainConfig<T>,
    loss_cfg: &LossConfig<T>,
    samples: &[&TrainingSample],
    grad: &mut TableGrad<T>,
    skipped: &mut usize,
) -> Result<(LossKind, T), TrainError> {
    let is_cls = samples.iter().any(|s| s.task == TaskKind::Cls);
    let mut instances = Vec::with_capacity(samples.len());
    for s in samples {
        match embed_instance(model, cfg, s) {
            Some(inst) if !is_cls || inst.label.is_some() => instances.push(inst),
            _ => *skipped += 1,
        }
    }
    if instances.is_empty() {
        return Err(LossError::EmptyBatch.into());
    }
    let outputs = |f: &dyn Fn(&Instance<T>) -> Vec<T>| instances.iter().map(f).collect::<Vec<_>>();
    let mut batch = EmbeddedBatch::new(
        outputs(&|i| i.query.output.clone()),
        outputs(&|i| i.positive.output.clone()),
        instances
            .iter()
            .map(|i| i.negatives.iter().map(|n| n.output.clone()).collect())
            .collect(),
    );
    let (kind, out) = if is_cls {
        batch = batch.with_labels(
            instances
                .iter()
                .map(|i| i.label.clone().expect("checked above"))
                .collect(),
            instances.iter().map(|i| i.neg_labels.clone()).collect(),
        );
        (LossKind::Cls, cls_loss(&batch, loss_cfg)?)
    } else {
        (LossKind::Retrieval, retrieval_loss(&batch, loss_cfg)?)
    };
    let g = out
        .grads
        .embeddings()
        .expect("InfoNCE kernels return embedding gradients");
    for (k, inst) in instances.iter().enumerate() {
        model.backward(&inst.query, &g.queries[k], grad);
        model.backward(&inst.positive, &g.positives[k], grad);
        for (n, neg) in inst.negatives.iter().enumerate() {
            model.backward(neg, &g.negatives[k][n], grad);
        }
    }
    Ok((kind, out.value))
}

fn cosent_step<T: Scalar>(
    model: &ToyEmbedder<T>,
    loss_cfg: &LossConfig<T>,
    pairs: &[&ScoredPair],
    grad: &mut TableGrad<T>,
    skipped: &mut usize,
) -> Result<T, TrainError> {
    let mut embedded = Vec::with_capacity(pairs.len());
    for p in pairs {
        match (model.forward(&p.text_a), model.forward(&p.text_b)) {
            (Ok(a), Ok(b)) => embedded.push((a, b, p.score)),
            _ => *skipped += 1,
        }
    }
    if embedded.is_empty() {
        return Err(LossError::EmptyBatch.into());
    }
    let batch = ScoredPairBatch::new(
        embedded.iter().map(|(a, b, _)| dot(&a.output, &b.output)).collect(),
        embedded.iter().map(|&(_, _, s)| s).collect(),
    );
    let out = cosent_loss(&batch, loss_cfg)?;
    let g = out.grads.sims().expect("Cosent returns similarity gradients");
    // d sim / d a = b and vice versa
    for ((a, b, _), &gs) in embedded.iter().zip(g) {
        let ga: Vec<T> = b.output.iter().map(|&x| x * gs).collect();
        let gb: Vec<T> = a.output.iter().map(|&x| x * gs).collect();
        model.backward(a, &ga, grad);
        model.backward(b, &gb, grad);
    }
    Ok(out.value)
}

/// Rank each positive among itself and its distractors by cosine to the
/// query. Ties count against the positive. Texts without tokens score -1.
pub fn evaluate_recall<T: Scalar>(model: &ToyEmbedder<T>, items: &[EvalItem]) -> Result<Recall, TrainError> {
    for (index, item) in items.iter().enumerate() {
        if item.distractors.len() < 5 {
            return Err(TrainError::TooFewDistractors {
                index,
                have: item.distractors.len(),
            });
        }
    }
    let score = |q: &Option<Vec<T>>, text: &str| match (q, model.embed(text)) {
        (Some(q), Ok(d)) => dot(q, &d).to_f64_lossy(),
        _ => -1.0,
    };
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for item in items {
        let q = model.embed(&with_instruction(&item.instruction, &item.query)).ok();
        let pos = score(&q, &item.positive);
        let rank = 1 + item.distractors.iter().filter(|d| score(&q, d) >= pos).count();
        hit1 += usize::from(rank <= 1);
        hit5 += usize::from(rank <= 5);
    }
    let n = items.len().max(1) as f64;
    Ok(Recall {
        at1: hit1 as f64 / n,
        at5: hit5 as f64 / n,
        items: items.len(),
    })
}
