//! Dataset-grouped batch scheduling.
//!
//! Every batch comes from exactly one dataset. Which dataset is drawn is a
//! seeded categorical choice over a [`SamplingPlan`]; the records inside a
//! batch are read sequentially from a per-dataset pointer that wraps at the
//! end of the file. The pointers, batch counter and RNG position make up the
//! [`SamplerState`], which round-trips through a small binary checkpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::stable_hash64;
use crate::scalar::{sum, Scalar};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_ETA: f64 = 0.72;
pub const DEFAULT_INFONCE_BATCH: usize = 256;
pub const DEFAULT_COSENT_BATCH: usize = 768;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("no datasets given")]
    EmptyList,
    #[error("dataset {0:?} has size 0")]
    EmptyDataset(String),
    #[error("alpha must be finite and >= 0")]
    InvalidAlpha,
    #[error("eta must lie in (0, 1)")]
    InvalidEta,
    #[error("two-stage plan needs at least one {0} dataset")]
    MissingSide(&'static str),
    #[error("dataset {0:?}: retrieval data must use the infonce loss")]
    LossMismatch(String),
    #[error("duplicate dataset name {0:?}")]
    DuplicateName(String),
    #[error("batch size for {0:?} must be positive")]
    ZeroBatchSize(LossFamily),
    #[error("corrupt sampler state: {0}")]
    CorruptState(String),
    #[error("reading manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

/// Loss family a dataset is trained with. Retrieval and classification data
/// use InfoNCE variants; scored NLI pairs use Cosent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    Infonce,
    Cosent,
}

/// One entry of `datasets.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub size: u64,
    pub is_retrieval: bool,
    pub loss: LossFamily,
    #[serde(default)]
    pub path: PathBuf,
}

impl DatasetMeta {
    pub fn new(name: impl Into<String>, size: u64, is_retrieval: bool, loss: LossFamily) -> Self {
        DatasetMeta {
            name: name.into(),
            size,
            is_retrieval,
            loss,
            path: PathBuf::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.size == 0 {
            return Err(SamplerError::EmptyDataset(self.name.clone()));
        }
        if self.is_retrieval && self.loss != LossFamily::Infonce {
            return Err(SamplerError::LossMismatch(self.name.clone()));
        }
        Ok(())
    }
}

/// Read a JSON array of [`DatasetMeta`]. Relative `path`s are resolved
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<DatasetMeta>, SamplerError> {
    let err = |message: String| SamplerError::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut metas: Vec<DatasetMeta> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for m in &mut metas {
        if !m.path.as_os_str().is_empty() && m.path.is_relative() {
            m.path = base.join(&m.path);
        }
    }
    Ok(metas)
}

/// Size-scaled weights `p_i = l_i^α / Σ_j l_j^α`.
pub fn compute_weights<T: Scalar>(sizes: &[u64], alpha: T) -> Result<Vec<T>, SamplerError> {
    if sizes.is_empty() {
        return Err(SamplerError::EmptyList);
    }
    if !(alpha >= T::zero() && alpha.is_finite()) {
        return Err(SamplerError::InvalidAlpha);
    }
    if sizes.contains(&0) {
        return Err(SamplerError::EmptyDataset(String::new()));
    }
    let scaled = scaled_sizes(sizes, alpha);
    let total = sum(scaled.iter().copied());
    Ok(scaled.into_iter().map(|s| s / total).collect())
}

fn scaled_sizes<T: Scalar>(sizes: &[u64], alpha: T) -> Vec<T> {
    sizes
        .iter()
        .map(|&l| T::from_u64(l).expect("size fits scalar").powf(alpha))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    One,
    Two,
}

/// What a plan ratio is a share of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioUnit {
    /// probability of drawing the dataset for a batch
    #[default]
    Batches,
    /// expected share of training samples; per-batch draw probabilities are
    /// divided by the dataset's batch size
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry<T> {
    pub name: String,
    pub size: u64,
    pub is_retrieval: bool,
    pub loss: LossFamily,
    pub ratio: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan<T> {
    pub stage: Stage,
    pub alpha: T,
    /// retrieval share; 1 in stage one
    pub eta: T,
    #[serde(default)]
    pub ratio_unit: RatioUnit,
    pub s_ret: T,
    pub s_non_ret: T,
    pub datasets: Vec<PlanEntry<T>>,
}

fn check_metas(datasets: &[DatasetMeta]) -> Result<(), SamplerError> {
    if datasets.is_empty() {
        return Err(SamplerError::EmptyList);
    }
    let mut seen = std::collections::BTreeSet::new();
    for d in datasets {
        d.validate()?;
        if !seen.insert(d.name.as_str()) {
            return Err(SamplerError::DuplicateName(d.name.clone()));
        }
    }
    Ok(())
}

fn entries<T: Scalar>(metas: &[&DatasetMeta], ratios: Vec<T>) -> Vec<PlanEntry<T>> {
    metas
        .iter()
        .zip(ratios)
        .map(|(m, ratio)| PlanEntry {
            name: m.name.clone(),
            size: m.size,
            is_retrieval: m.is_retrieval,
            loss: m.loss,
            ratio,
        })
        .collect()
}

/// Stage one: retrieval datasets only, weighted as in [`compute_weights`]. Non-retrieval
/// datasets are left out of the plan altogether.
pub fn compute_stage_one_plan<T: Scalar>(datasets: &[DatasetMeta], alpha: T) -> Result<SamplingPlan<T>, SamplerError> {
    check_metas(datasets)?;
    let ret: Vec<&DatasetMeta> = datasets.iter().filter(|d| d.is_retrieval).collect();
    if ret.is_empty() {
        return Err(SamplerError::MissingSide("retrieval"));
    }
    let sizes: Vec<u64> = ret.iter().map(|d| d.size).collect();
    let weights = compute_weights(&sizes, alpha)?;
    let s_ret = sum(scaled_sizes(&sizes, alpha));
    Ok(SamplingPlan {
        stage: Stage::One,
        alpha,
        eta: T::one(),
        ratio_unit: RatioUnit::Batches,
        s_ret,
        s_non_ret: T::zero(),
        datasets: entries(&ret, weights),
    })
}

/// Stage two: retrieval datasets share `eta`, the rest share `1 - eta`,
/// each side split by size-scaled weights:
/// `η·l_i^α / S_ret` for retrieval, `(1-η)·l_i^α / S_non_ret` otherwise.
pub fn compute_two_stage_plan<T: Scalar>(
    datasets: &[DatasetMeta],
    alpha: T,
    eta: T,
) -> Result<SamplingPlan<T>, SamplerError> {
    check_metas(datasets)?;
    if !(eta > T::zero() && eta < T::one()) {
        return Err(SamplerError::InvalidEta);
    }
    if !(alpha >= T::zero() && alpha.is_finite()) {
        return Err(SamplerError::InvalidAlpha);
    }
    let (ret, non_ret): (Vec<&DatasetMeta>, Vec<&DatasetMeta>) = datasets.iter().partition(|d| d.is_retrieval);
    if ret.is_empty() {
        return Err(SamplerError::MissingSide("retrieval"));
    }
    if non_ret.is_empty() {
        return Err(SamplerError::MissingSide("non-retrieval"));
    }
    let scaled = scaled_sizes(&datasets.iter().map(|d| d.size).collect::<Vec<_>>(), alpha);
    let side_sum = |want: bool| {
        sum(datasets
            .iter()
            .zip(&scaled)
            .filter(|(d, _)| d.is_retrieval == want)
            .map(|(_, &s)| s))
    };
    let s_ret = side_sum(true);
    let s_non_ret = side_sum(false);
    let ratios = datasets
        .iter()
        .zip(&scaled)
        .map(|(d, &s)| {
            if d.is_retrieval {
                eta * s / s_ret
            } else {
                (T::one() - eta) * s / s_non_ret
            }
        })
        .collect();
    let all: Vec<&DatasetMeta> = datasets.iter().collect();
    Ok(SamplingPlan {
        stage: Stage::Two,
        alpha,
        eta,
        ratio_unit: RatioUnit::Batches,
        s_ret,
        s_non_ret,
        datasets: entries(&all, ratios),
    })
}

impl<T: Scalar> SamplingPlan<T> {
    pub fn with_ratio_unit(mut self, unit: RatioUnit) -> Self {
        self.ratio_unit = unit;
        self
    }

    pub fn ratio_sum(&self) -> T {
        sum(self.datasets.iter().map(|d| d.ratio))
    }

    pub fn retrieval_sum(&self) -> T {
        sum(self.datasets.iter().filter(|d| d.is_retrieval).map(|d| d.ratio))
    }

    pub fn entry(&self, name: &str) -> Option<&PlanEntry<T>> {
        self.datasets.iter().find(|d| d.name == name)
    }

    /// Per-batch draw probabilities, aligned with `datasets`.
    pub fn batch_probabilities(&self, sizes: &BatchSizes) -> Vec<f64> {
        let raw: Vec<f64> = self
            .datasets
            .iter()
            .map(|d| {
                let r = d.ratio.to_f64_lossy();
                match self.ratio_unit {
                    RatioUnit::Batches => r,
                    RatioUnit::Samples => r / sizes.get(d.loss) as f64,
                }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|r| r / total).collect()
    }
}

/// Batch size per loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSizes {
    pub infonce: usize,
    pub cosent: usize,
}

impl Default for BatchSizes {
    fn default() -> Self {
        BatchSizes {
            infonce: DEFAULT_INFONCE_BATCH,
            cosent: DEFAULT_COSENT_BATCH,
        }
    }
}

impl BatchSizes {
    pub fn get(&self, loss: LossFamily) -> usize {
        match loss {
            LossFamily::Infonce => self.infonce,
            LossFamily::Cosent => self.cosent,
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        for loss in [LossFamily::Infonce, LossFamily::Cosent] {
            if self.get(loss) == 0 {
                return Err(SamplerError::ZeroBatchSize(loss));
            }
        }
        Ok(())
    }
}

/// Records of one single-dataset batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub dataset: String,
    pub loss: LossFamily,
    pub indices: Vec<u64>,
}

/// Read pointers, RNG position and batch counter.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    rng: ChaCha8Rng,
    offsets: BTreeMap<String, u64>,
    batches: u64,
}

impl SamplerState {
    pub fn new(seed: u64) -> Self {
        SamplerState {
            rng: ChaCha8Rng::seed_from_u64(seed),
            offsets: BTreeMap::new(),
            batches: 0,
        }
    }

    /// Next record index of `dataset`; 0 if never read.
    pub fn offset(&self, dataset: &str) -> u64 {
        self.offsets.get(dataset).copied().unwrap_or(0)
    }

    pub fn offsets(&self) -> &BTreeMap<String, u64> {
        &self.offsets
    }

    pub fn batches(&self) -> u64 {
        self.batches
    }

    pub fn set_offset(&mut self, dataset: impl Into<String>, offset: u64) {
        self.offsets.insert(dataset.into(), offset);
    }
}

/// Draw the next batch: pick a dataset by the plan, then read `B`
/// consecutive records from its pointer, wrapping at the end.
pub fn next_batch<T: Scalar>(plan: &SamplingPlan<T>, state: &mut SamplerState, sizes: &BatchSizes) -> BatchSpec {
    let probs = plan.batch_probabilities(sizes);
    next_batch_with(plan, &probs, state, sizes)
}

/// [`next_batch`] with precomputed [`SamplingPlan::batch_probabilities`].
pub fn next_batch_with<T: Scalar>(
    plan: &SamplingPlan<T>,
    probs: &[f64],
    state: &mut SamplerState,
    sizes: &BatchSizes,
) -> BatchSpec {
    let entry = &plan.datasets[draw(probs, &mut state.rng)];
    let b = sizes.get(entry.loss) as u64;
    let start = state.offset(&entry.name) % entry.size;
    let indices = (0..b).map(|k| (start + k) % entry.size).collect();
    state.offsets.insert(entry.name.clone(), (start + b) % entry.size);
    state.batches += 1;
    BatchSpec {
        dataset: entry.name.clone(),
        loss: entry.loss,
        indices,
    }
}

/// Inverse-CDF draw; zero-probability entries are never returned.
fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

const STATE_MAGIC: &[u8; 4] = b"EFSS";
const STATE_VERSION: u32 = 1;

/// Binary checkpoint: magic, version, ChaCha seed/stream/word position,
/// batch counter, name-sorted offsets, then a checksum of everything before.
/// Integers are little-endian.
pub fn save_state(state: &SamplerState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&state.batches.to_le_bytes());
    out.extend_from_slice(&(state.offsets.len() as u32).to_le_bytes());
    for (name, &offset) in &state.offsets {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
    }
    let check = stable_hash64(&[&out]);
    out.extend_from_slice(&check.to_le_bytes());
    out
}

pub fn restore_state(bytes: &[u8]) -> Result<SamplerState, SamplerError> {
    let corrupt = |m: &str| SamplerError::CorruptState(m.to_string());
    if bytes.len() < 8 {
        return Err(corrupt("truncated"));
    }
    let (body, check) = bytes.split_at(bytes.len() - 8);
    if stable_hash64(&[body]).to_le_bytes() != check {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body };
    if r.take(4)? != STATE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != STATE_VERSION {
        return Err(SamplerError::CorruptState(format!("unsupported version {version}")));
    }
    let seed: [u8; 32] = r.array()?;
    let stream = u64::from_le_bytes(r.array()?);
    let word_pos = u128::from_le_bytes(r.array()?);
    let batches = u64::from_le_bytes(r.array()?);
    let count = u32::from_le_bytes(r.array()?);
    let mut offsets = BTreeMap::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| corrupt("dataset name is not utf-8"))?
            .to_string();
        offsets.insert(name, u64::from_le_bytes(r.array()?));
    }
    if !r.buf.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(SamplerState { rng, offsets, batches })
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SamplerError> {
        if self.buf.len() < n {
            return Err(SamplerError::CorruptState("truncated".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], SamplerError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(name: &str, size: u64, ret: bool) -> DatasetMeta {
        let loss = if ret { LossFamily::Infonce } else { LossFamily::Cosent };
        DatasetMeta::new(name, size, ret, loss)
    }

    #[test]
    fn weights_examples() {
        assert_eq!(compute_weights(&[100, 100], 0.7).unwrap(), vec![0.5, 0.5]);
        assert_eq!(compute_weights(&[100, 900], 0.5).unwrap(), vec![0.25, 0.75]);
        assert_eq!(compute_weights(&[100, 900], 0.0).unwrap(), vec![0.5, 0.5]);
        assert_eq!(compute_weights::<f64>(&[], 0.5).unwrap_err(), SamplerError::EmptyList);
        assert_eq!(compute_weights(&[1], -1.0).unwrap_err(), SamplerError::InvalidAlpha);
    }

    #[test]
    fn two_stage_examples() {
        let plan = compute_two_stage_plan(&[meta("r", 100, true), meta("n", 100, false)], 1.0, 0.72).unwrap();
        let ratios: Vec<f64> = plan.datasets.iter().map(|d| d.ratio).collect();
        assert!((ratios[0] - 0.72).abs() < 1e-15 && (ratios[1] - 0.28).abs() < 1e-15);

        let plan = compute_two_stage_plan(
            &[meta("a", 50, true), meta("b", 50, true), meta("n", 7, false)],
            0.5,
            0.72,
        )
        .unwrap();
        let ratios: Vec<f64> = plan.datasets.iter().map(|d| d.ratio).collect();
        for (r, want) in ratios.iter().zip([0.36, 0.36, 0.28]) {
            assert!((r - want).abs() < 1e-15);
        }

        assert_eq!(
            compute_two_stage_plan(&[meta("a", 5, true)], 0.5, 0.72).unwrap_err(),
            SamplerError::MissingSide("non-retrieval")
        );
        assert_eq!(
            compute_two_stage_plan(&[meta("a", 5, true), meta("n", 5, false)], 0.5, 1.0).unwrap_err(),
            SamplerError::InvalidEta
        );
    }

    #[test]
    fn stage_one_drops_non_retrieval() {
        let plan = compute_stage_one_plan(
            &[meta("a", 100, true), meta("n", 100, false), meta("b", 900, true)],
            0.5,
        )
        .unwrap();
        let names: Vec<&str> = plan.datasets.iter().map(|d| d.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(plan.ratio_sum(), 1.0);
    }

    #[test]
    fn wraps_at_end_of_file() {
        let plan = compute_stage_one_plan(&[meta("a", 10, true)], 0.5).unwrap();
        let mut state = SamplerState::new(3);
        state.set_offset("a", 8);
        let sizes = BatchSizes { infonce: 4, cosent: 4 };
        let b = next_batch(&plan, &mut state, &sizes);
        assert_eq!(b.indices, vec![8, 9, 0, 1]);
        assert_eq!(state.offset("a"), 2);
    }

    #[test]
    fn small_dataset_wraps_within_a_batch() {
        let plan = compute_stage_one_plan(&[meta("a", 3, true)], 0.5).unwrap();
        let mut state = SamplerState::new(0);
        let b = next_batch(&plan, &mut state, &BatchSizes { infonce: 7, cosent: 1 });
        assert_eq!(b.indices, vec![0, 1, 2, 0, 1, 2, 0]);
        assert_eq!(state.offset("a"), 1);
    }

    #[test]
    fn samples_unit_divides_by_batch_size() {
        let plan = compute_two_stage_plan(&[meta("r", 100, true), meta("n", 100, false)], 1.0, 0.5)
            .unwrap()
            .with_ratio_unit(RatioUnit::Samples);
        let p = plan.batch_probabilities(&BatchSizes {
            infonce: 256,
            cosent: 768,
        });
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn state_round_trip_and_corruption() {
        let plan = compute_two_stage_plan(&[meta("r", 13, true), meta("n", 29, false)], 0.5, 0.72).unwrap();
        let sizes = BatchSizes { infonce: 5, cosent: 7 };
        let mut state = SamplerState::new(11);
        for _ in 0..17 {
            next_batch(&plan, &mut state, &sizes);
        }
        let bytes = save_state(&state);
        let restored = restore_state(&bytes).unwrap();
        assert_eq!(restored, state);
        assert_eq!(save_state(&restored), bytes);

        assert!(matches!(
            restore_state(&bytes[..bytes.len() - 3]),
            Err(SamplerError::CorruptState(_))
        ));
        let mut flipped = bytes.clone();
        flipped[10] ^= 1;
        assert!(matches!(restore_state(&flipped), Err(SamplerError::CorruptState(_))));
        assert!(matches!(restore_state(&[]), Err(SamplerError::CorruptState(_))));
    }

    #[test]
    fn fresh_state_has_zero_offsets() {
        let state = SamplerState::new(0);
        assert!(state.offsets().is_empty());
        assert_eq!(state.offset("anything"), 0);
        assert_eq!(state.batches(), 0);
    }

    #[test]
    fn retrieval_with_cosent_is_rejected() {
        let bad = DatasetMeta::new("x", 3, true, LossFamily::Cosent);
        assert_eq!(bad.validate().unwrap_err(), SamplerError::LossMismatch("x".into()));
    }
}
