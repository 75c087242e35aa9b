use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use embforge_core::corpus::{
    attach_instruction, read_jsonl, write_jsonl, InstructionRegistry, RawRecord, RecordKind, TaskKind, TrainingSample,
};
use embforge_core::embed::ToyEmbedder;
use embforge_core::fixtures::write_fixtures;
use embforge_core::losses::{
    cls_loss, cosent_loss, grad_check, retrieval_loss, EmbeddedBatch, GradCheckTarget, LossConfig, ScoredPairBatch,
};
use embforge_core::mining::{
    dedup_by_key, dedup_key, mine_hard_negatives, quality_filter, EmbeddingScorer, MiningConfig, MiningError,
};
use embforge_core::pipeline::{
    read_records, train_datasets, Pipeline, PipelineConfig, Record, RunOptions, StageStatus,
};
use embforge_core::sampler::{compute_stage_one_plan, compute_two_stage_plan, load_manifest, RatioUnit};
use embforge_core::scalar::{dot, l2_norm};
use embforge_core::synthesis::{
    apply_retrieval_policy, augment, gen_hard_negatives, paraphrase, run_batch, ConstraintSet, HttpClient, LlmClient,
    LlmClientConfig, StubClient,
};
use embforge_core::trainer::{train, EvalItem, TrainConfig};
use embforge_core::transform::{transform_records, TransformOptions};

use crate::{Command, LossArg, SynthMode, UnitArg};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Transform {
            kind,
            input,
            out,
            max_chars,
            negs,
            seed,
            binarize_threshold,
            instructions,
        } => {
            let kind: RecordKind = parse_name(&kind).context("--kind")?;
            let records: Vec<RawRecord> = read_jsonl(&input)?;
            for r in &records {
                r.validate()?;
            }
            let opts = TransformOptions {
                max_chars,
                negatives_per_sample: negs,
                seed,
                binarize_threshold,
            };
            let t = transform_records(kind, &records, &opts)?;
            let mut registry = InstructionRegistry::builtin();
            if let Some(p) = instructions {
                registry.extend(InstructionRegistry::load(&p)?);
            }
            let mut missing = Vec::new();
            let mut lines: Vec<Record> = Vec::with_capacity(t.samples.len() + t.pairs.len());
            for s in t.samples {
                let (s, warning) = attach_instruction(s, &registry);
                if let Some(w) = warning {
                    if !missing.contains(&w.dataset) {
                        event(json!({"event": "missing_instruction", "dataset": w.dataset}));
                        missing.push(w.dataset);
                    }
                }
                lines.push(Record::Sample(s));
            }
            lines.extend(t.pairs.into_iter().map(Record::Pair));
            write_jsonl(&out, &lines)?;
            println!(
                "transform: {} records → {} lines in {}",
                records.len(),
                lines.len(),
                out.display()
            );
        }

        Command::Synthesize {
            mode,
            input,
            out,
            n,
            stub,
            base_url,
            model,
            api_key_env,
            parallel,
            seed,
            fault_rate,
            audit,
        } => {
            let samples: Vec<TrainingSample> = read_jsonl(&input)?;
            let client: Box<dyn LlmClient> = match (stub, base_url) {
                (_, Some(base_url)) => Box::new(
                    HttpClient::new(LlmClientConfig {
                        base_url,
                        model_name: model.unwrap_or_default(),
                        api_key_env_var: api_key_env,
                        max_parallel_requests: parallel,
                        offline_stub: false,
                        ..LlmClientConfig::default()
                    })
                    .require_key()?,
                ),
                (true, None) => Box::new(StubClient::new(seed).with_fault_rate(fault_rate)),
                (false, None) => bail!("pass --stub or --base-url URL --model NAME"),
            };
            let client = client.as_ref();
            let (retrieval, rest): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.task == TaskKind::Retrieval);
            let mut records = Vec::new();
            let (mut output, stats) = match mode {
                SynthMode::Paraphrase | SynthMode::Augment => {
                    let (results, stats) = match mode {
                        SynthMode::Paraphrase => {
                            let c = ConstraintSet::paraphrase();
                            run_batch(&retrieval, parallel, |s| paraphrase(s, client, &c, n))?
                        }
                        _ => {
                            let c = ConstraintSet::augment();
                            run_batch(&retrieval, parallel, |s| augment(s, client, &c, n))?
                        }
                    };
                    let mut generated = Vec::new();
                    for r in results {
                        records.extend(r.records);
                        generated.extend(r.items);
                    }
                    (apply_retrieval_policy(retrieval, generated), stats)
                }
                SynthMode::Hardneg => {
                    let c = ConstraintSet::hard_negative();
                    let (results, stats) = run_batch(&retrieval, parallel, |s| gen_hard_negatives(s, client, &c, n))?;
                    let mut samples = retrieval;
                    for (s, r) in samples.iter_mut().zip(results) {
                        records.extend(r.records);
                        for neg in r.items {
                            if !s.negatives.contains(&neg) {
                                s.negatives.push(neg);
                            }
                        }
                    }
                    (samples, stats)
                }
            };
            output.extend(rest);
            write_jsonl(&out, &output)?;
            if let Some(p) = audit {
                write_jsonl(&p, &records)?;
            }
            event(json!({"event": "synthesis", "stats": stats}));
            println!(
                "synthesize: {} accepted, {} rejected, {} degenerate, {} API errors; {} samples in {}",
                stats.accepted,
                stats.rejected,
                stats.degenerate,
                stats.api_errors,
                output.len(),
                out.display()
            );
        }

        Command::Mine {
            input,
            corpus,
            out,
            rank_lo,
            rank_hi,
            negs,
            checkpoint,
            seed,
        } => {
            let samples: Vec<TrainingSample> = read_jsonl(&input)?;
            let docs: Vec<String> = fs::read_to_string(&corpus)
                .with_context(|| corpus.display().to_string())?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect();
            let cfg = MiningConfig {
                rank_lo,
                rank_hi,
                negatives_per_query: negs,
                ..MiningConfig::default()
            };
            cfg.validate()?;
            let model = scorer_model(checkpoint.as_deref(), seed)?;
            let scorer = EmbeddingScorer::new(&model);
            let mut too_small = 0usize;
            let mut mined = Vec::with_capacity(samples.len());
            for s in samples {
                if s.task != TaskKind::Retrieval {
                    mined.push(s);
                    continue;
                }
                match mine_hard_negatives(&s, &docs, &scorer, &cfg, seed) {
                    Ok(m) => mined.push(m),
                    Err(MiningError::CorpusTooSmall { .. }) => {
                        too_small += 1;
                        mined.push(s);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if too_small > 0 {
                event(json!({"event": "corpus_too_small", "samples": too_small}));
            }
            write_jsonl(&out, &mined)?;
            println!(
                "mine: {} samples, {} left unmined, written to {}",
                mined.len(),
                too_small,
                out.display()
            );
        }

        Command::Dedup { input, out } => {
            let records = read_records(&input).map_err(anyhow::Error::msg)?;
            let before = records.len();
            let kept: Vec<Record> = dedup_by_key(records, |r: &Record| match r {
                Record::Sample(s) => (String::new(), dedup_key(s)),
                Record::Pair(p) => (p.dataset.clone(), (p.text_a.clone(), p.text_b.clone())),
            })
            .collect();
            write_jsonl(&out, &kept)?;
            println!("dedup: {before} → {} lines in {}", kept.len(), out.display());
        }

        Command::Filter {
            input,
            out,
            threshold,
            checkpoint,
            seed,
        } => {
            let samples: Vec<TrainingSample> = read_jsonl(&input)?;
            let model = scorer_model(checkpoint.as_deref(), seed)?;
            let (retrieval, rest): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.task == TaskKind::Retrieval);
            let (mut kept, dropped) = quality_filter(retrieval, &EmbeddingScorer::new(&model), threshold)?;
            kept.extend(rest);
            write_jsonl(&out, &kept)?;
            println!("filter: kept {}, dropped {dropped} below {threshold}", kept.len());
        }

        Command::Plan {
            stage,
            alpha,
            eta,
            ratio_unit,
            manifest,
            out,
        } => {
            let metas = load_manifest(&manifest)?;
            let unit = match ratio_unit {
                UnitArg::Batches => RatioUnit::Batches,
                UnitArg::Samples => RatioUnit::Samples,
            };
            let plan = match stage {
                1 => compute_stage_one_plan(&metas, alpha)?,
                _ => compute_two_stage_plan(&metas, alpha, eta)?,
            }
            .with_ratio_unit(unit);
            write_pretty(&out, &plan)?;
            for e in &plan.datasets {
                println!("{:<24} {:.6}", e.name, e.ratio);
            }
        }

        Command::Train {
            manifest,
            config,
            report,
            checkpoint,
            eval,
        } => {
            let cfg: TrainConfig<f64> = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            let metas = load_manifest(&manifest)?;
            // datasets may share one mixed JSONL file; read each file once
            let mut files: BTreeMap<PathBuf, Vec<Record>> = BTreeMap::new();
            for m in &metas {
                if !files.contains_key(&m.path) {
                    files.insert(m.path.clone(), read_records(&m.path).map_err(anyhow::Error::msg)?);
                }
            }
            let wanted: Vec<&str> = metas.iter().map(|m| m.name.as_str()).collect();
            let records: Vec<Record> = files
                .into_values()
                .flatten()
                .filter(|r| wanted.contains(&r.dataset()))
                .collect();
            let data = train_datasets(records, &metas).map_err(anyhow::Error::msg)?;
            let eval: Option<Vec<EvalItem>> = eval.map(|p| read_jsonl(&p)).transpose()?;
            let (model, rep) = train(&cfg, &data, eval.as_deref())?;
            model.save(&checkpoint)?;
            write_pretty(&report, &rep)?;
            println!(
                "train: {} + {} steps{}",
                rep.stage1.len(),
                rep.stage2.len(),
                match (&rep.recall_stage1, &rep.recall) {
                    (Some(a), Some(b)) => format!(", recall@1 {:.3} after stage 1, {:.3} after stage 2", a.at1, b.at1),
                    _ => String::new(),
                }
            );
        }

        Command::EvalLoss {
            kind,
            batch,
            tau,
            gradcheck,
            epsilon,
        } => {
            let cfg = LossConfig::with_temperature(tau);
            let report = match kind {
                LossArg::Retrieval | LossArg::Cls => {
                    let b = normalized(read_json::<EmbeddedBatch<f64>>(&batch)?);
                    let (out, target) = match kind {
                        LossArg::Retrieval => (retrieval_loss(&b, &cfg)?, GradCheckTarget::Retrieval(&b)),
                        _ => (cls_loss(&b, &cfg)?, GradCheckTarget::Cls(&b)),
                    };
                    let check = gradcheck.then(|| grad_check(target, &cfg, epsilon)).transpose()?;
                    json!({"loss": out.value, "per_instance": out.per_instance, "gradcheck": check})
                }
                LossArg::Cosent => {
                    let b = read_json::<CosentInput>(&batch)?.into_batch()?;
                    let out = cosent_loss(&b, &cfg)?;
                    let check = gradcheck
                        .then(|| grad_check(GradCheckTarget::Cosent(&b), &cfg, epsilon))
                        .transpose()?;
                    json!({"loss": out.value, "gradcheck": check})
                }
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
        }

        Command::Run { config, stub, force } => {
            let cfg = PipelineConfig::load(&config)?;
            let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
            let summary = Pipeline::new(cfg, &base, RunOptions { stub, force })
                .with_events(|e| eprintln!("{e}"))
                .run()?;
            for s in &summary.stages {
                let status = match s.status {
                    StageStatus::Ran => format!("done in {} ms", s.elapsed_ms),
                    StageStatus::UpToDate => "up to date".to_string(),
                };
                println!("{:<11} {:>7} records  {status}", s.stage.as_str(), s.records_out);
            }
            let report = summary.workspace.join("eval").join("report.json");
            if report.is_file() {
                println!("report: {}", report.display());
            }
        }

        Command::Fixtures { out, seed } => {
            let files = write_fixtures(&out, seed).with_context(|| out.display().to_string())?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

/// Cosent input: similarities directly, or two lists of vectors whose
/// cosine similarities are taken.
#[derive(Deserialize)]
#[serde(untagged)]
enum CosentInput {
    Sims {
        sims: Vec<f64>,
        scores: Vec<u8>,
    },
    Vectors {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        scores: Vec<u8>,
    },
}

impl CosentInput {
    fn into_batch(self) -> Result<ScoredPairBatch<f64>> {
        Ok(match self {
            CosentInput::Sims { sims, scores } => ScoredPairBatch::new(sims, scores),
            CosentInput::Vectors { a, b, scores } => {
                if a.len() != b.len() {
                    bail!("{} left vectors but {} right vectors", a.len(), b.len());
                }
                let sims = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| dot(x, y) / (l2_norm(x) * l2_norm(y)))
                    .collect();
                ScoredPairBatch::new(sims, scores)
            }
        })
    }
}

fn normalized(mut b: EmbeddedBatch<f64>) -> EmbeddedBatch<f64> {
    let unit = |v: &mut Vec<f64>| {
        let n = l2_norm(v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
    };
    b.queries.iter_mut().for_each(unit);
    b.positives.iter_mut().for_each(unit);
    b.negatives.iter_mut().flatten().for_each(unit);
    b
}

fn scorer_model(checkpoint: Option<&Path>, seed: u64) -> Result<ToyEmbedder<f64>> {
    Ok(match checkpoint {
        Some(p) => ToyEmbedder::load(p)?,
        None => {
            let d = TrainConfig::<f64>::default();
            ToyEmbedder::new(d.vocab, d.dim, seed)?
        }
    })
}

/// Parse a snake_case enum name through its serde representation.
fn parse_name<T: DeserializeOwned>(name: &str) -> Result<T> {
    serde_json::from_value(Value::String(name.replace('-', "_"))).with_context(|| format!("unknown value {name:?}"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    serde_json::from_str(&text).with_context(|| path.display().to_string())
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| path.display().to_string())
}

fn event(v: Value) {
    eprintln!("{v}");
}
