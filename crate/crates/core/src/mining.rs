//! Scorer-ranked hard-negative mining, deduplication and query-positive
//! quality filtering.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::sync::RwLock;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TaskKind, TrainingSample};
use crate::embed::ToyEmbedder;
use crate::hashing::stable_hash64;
use crate::scalar::{dot, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum MiningError {
    #[error("candidate corpus has {have} usable entries, need at least {need}")]
    CorpusTooSmall { have: usize, need: usize },
    #[error("invalid mining config: {0}")]
    InvalidConfig(String),
    #[error("threshold {0} outside [-1, 1]")]
    InvalidThreshold(f64),
    #[error("synth fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
}

/// Similarity oracle used for mining and filtering.
pub trait Scorer {
    /// Similarity in `[-1, 1]`.
    fn score(&self, a: &str, b: &str) -> f64;

    /// Corpus indices by descending score; ties keep the lower index first.
    fn rank(&self, query: &str, corpus: &[String]) -> Vec<usize> {
        let scores: Vec<f64> = corpus.iter().map(|doc| self.score(query, doc)).collect();
        rank_by_scores(&scores)
    }
}

/// Indices by descending score, ties by ascending index.
pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// Cosine scorer over a [`ToyEmbedder`]. Embeddings are memoised, so
/// ranking many queries against one corpus embeds each document once.
/// Texts without tokens score -1 against everything.
pub struct EmbeddingScorer<'a, T> {
    embedder: &'a ToyEmbedder<T>,
    cache: RwLock<HashMap<String, Option<Vec<T>>>>,
}

impl<'a, T: Scalar> EmbeddingScorer<'a, T> {
    pub fn new(embedder: &'a ToyEmbedder<T>) -> Self {
        EmbeddingScorer {
            embedder,
            cache: RwLock::new(HashMap::new()),
        }
    }

    fn vector(&self, text: &str) -> Option<Vec<T>> {
        if let Some(v) = self.cache.read().expect("scorer cache poisoned").get(text) {
            return v.clone();
        }
        let v = self.embedder.embed(text).ok();
        self.cache
            .write()
            .expect("scorer cache poisoned")
            .insert(text.to_string(), v.clone());
        v
    }
}

impl<T: Scalar> Scorer for EmbeddingScorer<'_, T> {
    fn score(&self, a: &str, b: &str) -> f64 {
        match (self.vector(a), self.vector(b)) {
            (Some(x), Some(y)) => dot(&x, &y).to_f64_lossy().clamp(-1.0, 1.0),
            _ => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// first eligible rank, 1-based
    pub rank_lo: usize,
    /// last eligible rank, inclusive
    pub rank_hi: usize,
    pub negatives_per_query: usize,
    pub filter_threshold: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            rank_lo: 10,
            rank_hi: 30,
            negatives_per_query: 4,
            filter_threshold: 0.3,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), MiningError> {
        if self.rank_lo < 1 || self.rank_lo > self.rank_hi {
            return Err(MiningError::InvalidConfig(format!(
                "need 1 <= rank_lo <= rank_hi, got {}..{}",
                self.rank_lo, self.rank_hi
            )));
        }
        if self.negatives_per_query > self.rank_hi - self.rank_lo + 1 {
            return Err(MiningError::InvalidConfig(format!(
                "{} negatives do not fit ranks {}..={}",
                self.negatives_per_query, self.rank_lo, self.rank_hi
            )));
        }
        Ok(())
    }
}

/// Fill `sample.negatives` up to `cfg.negatives_per_query` with texts drawn
/// uniformly (without replacement) from ranks `rank_lo..=rank_hi` of the
/// scorer's ranking of `corpus` against the query.
///
/// Entries equal to the query, the positive or an existing negative are
/// removed from the corpus before ranking. Existing negatives are kept;
/// a sample that already has enough is returned unchanged. Only retrieval
/// samples are mined; others are returned as-is.
pub fn mine_hard_negatives(
    sample: &TrainingSample,
    corpus: &[String],
    scorer: &dyn Scorer,
    cfg: &MiningConfig,
    seed: u64,
) -> Result<TrainingSample, MiningError> {
    cfg.validate()?;
    let missing = cfg.negatives_per_query.saturating_sub(sample.negatives.len());
    if missing == 0 || sample.task != TaskKind::Retrieval {
        return Ok(sample.clone());
    }
    let candidates = mining_candidates(sample, corpus);
    if candidates.len() < cfg.rank_hi {
        return Err(MiningError::CorpusTooSmall {
            have: candidates.len(),
            need: cfg.rank_hi,
        });
    }
    let ranked = scorer.rank(&sample.query, &candidates);
    let window = &ranked[cfg.rank_lo - 1..cfg.rank_hi];
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ stable_hash64(&[sample.query.as_bytes(), sample.positive.as_bytes()]));
    let mut picks = index::sample(&mut rng, window.len(), missing).into_vec();
    // window order, so output follows rank rather than draw order
    picks.sort_unstable();
    let mut out = sample.clone();
    out.negatives
        .extend(picks.into_iter().map(|p| candidates[window[p]].clone()));
    Ok(out)
}

/// The corpus as ranked by [`mine_hard_negatives`]: without the query, the
/// positive and already-present negatives. Order is preserved.
pub fn mining_candidates(sample: &TrainingSample, corpus: &[String]) -> Vec<String> {
    corpus
        .iter()
        .filter(|t| **t != sample.query && **t != sample.positive && !sample.negatives.contains(t))
        .cloned()
        .collect()
}

/// Key under which two samples are duplicates: trimmed, case-folded
/// (query, positive).
pub fn dedup_key(sample: &TrainingSample) -> (String, String) {
    (
        sample.query.trim().to_lowercase(),
        sample.positive.trim().to_lowercase(),
    )
}

/// Streaming deduplication keeping the first occurrence of each key.
pub struct Dedup<I, F, K> {
    inner: I,
    key: F,
    seen: HashSet<K>,
}

impl<I, F, K> Iterator for Dedup<I, F, K>
where
    I: Iterator,
    F: FnMut(&I::Item) -> K,
    K: Eq + std::hash::Hash,
{
    type Item = I::Item;

    fn next(&mut self) -> Option<I::Item> {
        for item in self.inner.by_ref() {
            if self.seen.insert((self.key)(&item)) {
                return Some(item);
            }
        }
        None
    }
}

pub fn dedup_by_key<I, F, K>(items: I, key: F) -> Dedup<I::IntoIter, F, K>
where
    I: IntoIterator,
    F: FnMut(&I::Item) -> K,
{
    Dedup {
        inner: items.into_iter(),
        key,
        seen: HashSet::new(),
    }
}

/// Drop later samples whose (query, positive) repeats an earlier one.
pub fn dedup<I>(samples: I) -> impl Iterator<Item = TrainingSample>
where
    I: IntoIterator<Item = TrainingSample>,
{
    dedup_by_key(samples, dedup_key)
}

/// Keep samples with `score(query, positive) >= threshold`. Returns the kept
/// samples and how many were dropped.
pub fn quality_filter(
    samples: Vec<TrainingSample>,
    scorer: &dyn Scorer,
    threshold: f64,
) -> Result<(Vec<TrainingSample>, usize), MiningError> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(MiningError::InvalidThreshold(threshold));
    }
    let before = samples.len();
    let kept: Vec<TrainingSample> = samples
        .into_iter()
        .filter(|s| scorer.score(&s.query, &s.positive) >= threshold)
        .collect();
    let dropped = before - kept.len();
    Ok((kept, dropped))
}

/// Deterministic split by a hash of the query: roughly `synth_fraction` of
/// samples go to the first (synthesis) side, the rest to the mining side.
pub fn partition_by_hash(
    samples: Vec<TrainingSample>,
    synth_fraction: f64,
) -> Result<(Vec<TrainingSample>, Vec<TrainingSample>), MiningError> {
    if !(0.0..=1.0).contains(&synth_fraction) {
        return Err(MiningError::InvalidFraction(synth_fraction));
    }
    Ok(samples
        .into_iter()
        .partition(|s| goes_to_synthesis(&s.query, synth_fraction)))
}

pub fn goes_to_synthesis(query: &str, synth_fraction: f64) -> bool {
    let h = stable_hash64(&[b"partition", query.as_bytes()]);
    (h as f64 / u64::MAX as f64) < synth_fraction
}
