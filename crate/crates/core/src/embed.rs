//! Hashed bag-of-tokens embedder: each token selects a row of a `V x d`
//! table, rows are mean-pooled and the result is L2-normalized.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::hashing::stable_hash64;
use crate::scalar::{dot, Scalar};

pub const DEFAULT_VOCAB: usize = 1 << 16;
pub const DEFAULT_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text has no tokens")]
    EmptyText,
    #[error("invalid dimensions {vocab}x{dim}: need vocab >= 1 and dim >= 2")]
    InvalidDims { vocab: usize, dim: usize },
    #[error("model file: {0}")]
    CorruptModel(String),
    #[error("model file I/O: {0}")]
    Io(#[from] io::Error),
}

/// Split on whitespace and punctuation, case-folded. Han, kana and hangul
/// characters become one token each since those scripts do not separate
/// words with spaces.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if is_cjk(ch) {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            tokens.push(ch.to_string());
        } else if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

fn is_cjk(ch: char) -> bool {
    matches!(ch as u32,
        0x3040..=0x30FF      // kana
        | 0x3400..=0x4DBF    // CJK ext A
        | 0x4E00..=0x9FFF    // CJK unified
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // CJK compatibility
        | 0x20000..=0x2FA1F) // CJK ext B..
}

/// Query text as embedded: the instruction, when present, goes in front.
pub fn with_instruction(instruction: &str, query: &str) -> String {
    if instruction.trim().is_empty() {
        query.to_string()
    } else {
        format!("{instruction} {query}")
    }
}

/// Forward-pass intermediates needed by [`ToyEmbedder::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled<T> {
    pub ids: Vec<usize>,
    pub norm: T,
    /// the unit-norm embedding
    pub output: Vec<T>,
}

/// Sparse gradient with respect to the embedding table, keyed by row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TableGrad<T> {
    pub rows: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> TableGrad<T> {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEmbedder<T> {
    vocab: usize,
    dim: usize,
    hash_seed: u64,
    /// row-major `vocab x dim`
    weights: Vec<T>,
}

impl<T: Scalar> ToyEmbedder<T> {
    /// Table initialised with i.i.d. `N(0, 1/d)` entries drawn from `hash_seed`.
    pub fn new(vocab: usize, dim: usize, hash_seed: u64) -> Result<Self, EmbedError> {
        if vocab == 0 || dim < 2 {
            return Err(EmbedError::InvalidDims { vocab, dim });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hash_seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("finite std");
        let weights = (0..vocab * dim).map(|_| T::lit(normal.sample(&mut rng))).collect();
        Ok(ToyEmbedder {
            vocab,
            dim,
            hash_seed,
            weights,
        })
    }

    pub fn from_weights(vocab: usize, dim: usize, hash_seed: u64, weights: Vec<T>) -> Result<Self, EmbedError> {
        if vocab == 0 || dim < 2 {
            return Err(EmbedError::InvalidDims { vocab, dim });
        }
        if weights.len() != vocab * dim {
            return Err(EmbedError::CorruptModel(format!(
                "{} weights for a {vocab}x{dim} table",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(EmbedError::CorruptModel("non-finite weight".into()));
        }
        Ok(ToyEmbedder {
            vocab,
            dim,
            hash_seed,
            weights,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hash_seed(&self) -> u64 {
        self.hash_seed
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn row(&self, id: usize) -> &[T] {
        &self.weights[id * self.dim..(id + 1) * self.dim]
    }

    pub fn feature_id(&self, token: &str) -> usize {
        (stable_hash64(&[&self.hash_seed.to_le_bytes(), token.as_bytes()]) % self.vocab as u64) as usize
    }

    pub fn feature_ids(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.feature_id(t)).collect()
    }

    pub fn embed(&self, text: &str) -> Result<Vec<T>, EmbedError> {
        Ok(self.forward(text)?.output)
    }

    pub fn forward(&self, text: &str) -> Result<Pooled<T>, EmbedError> {
        self.forward_ids(self.feature_ids(text))
    }

    pub fn forward_ids(&self, ids: Vec<usize>) -> Result<Pooled<T>, EmbedError> {
        if ids.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut mean = vec![T::zero(); self.dim];
        for &id in &ids {
            for (m, &w) in mean.iter_mut().zip(self.row(id)) {
                *m += w;
            }
        }
        let count = T::from_usize(ids.len()).expect("token count fits scalar");
        for m in &mut mean {
            *m /= count;
        }
        let norm = dot(&mean, &mean).sqrt();
        if !(norm > T::zero()) {
            return Err(EmbedError::EmptyText);
        }
        let output = mean.into_iter().map(|m| m / norm).collect();
        Ok(Pooled { ids, norm, output })
    }

    /// Accumulate `d loss / d W` given `d loss / d output` for one text.
    /// With `e = u/|u|`: `du = (g - e(e·g)) / |u|`, and every token row of
    /// the mean receives `du / count`.
    pub fn backward(&self, pooled: &Pooled<T>, grad_out: &[T], into: &mut TableGrad<T>) {
        let e = &pooled.output;
        let proj = dot(e, grad_out);
        let count = T::from_usize(pooled.ids.len()).expect("token count fits scalar");
        let scale = T::one() / (pooled.norm * count);
        let du: Vec<T> = grad_out
            .iter()
            .zip(e)
            .map(|(&g, &ei)| (g - ei * proj) * scale)
            .collect();
        for &id in &pooled.ids {
            let row = into.rows.entry(id).or_insert_with(|| vec![T::zero(); self.dim]);
            for (r, &d) in row.iter_mut().zip(&du) {
                *r += d;
            }
        }
    }

    /// `W -= lr * grad`, then optional decoupled weight decay on the rows
    /// that were touched.
    pub fn apply(&mut self, grad: &TableGrad<T>, lr: T, weight_decay: T) {
        for (&id, g) in &grad.rows {
            let row = &mut self.weights[id * self.dim..(id + 1) * self.dim];
            for (w, &gi) in row.iter_mut().zip(g) {
                *w -= lr * (gi + weight_decay * *w);
            }
        }
    }

    /// `model.bin`: magic, format version, vocab, dim, hash seed, then the
    /// row-major table as little-endian f64.
    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.vocab as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&self.hash_seed.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.weights.len() * 8);
        for &x in &self.weights {
            buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, EmbedError> {
        let mut header = [0u8; 4 + 4 + 8 * 3];
        r.read_exact(&mut header)
            .map_err(|_| EmbedError::CorruptModel("truncated header".into()))?;
        if &header[..4] != MODEL_MAGIC {
            return Err(EmbedError::CorruptModel("bad magic".into()));
        }
        let u64_at = |at: usize| u64::from_le_bytes(header[at..at + 8].try_into().expect("8 bytes"));
        let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
        if version != MODEL_VERSION {
            return Err(EmbedError::CorruptModel(format!("unsupported version {version}")));
        }
        let (vocab, dim, seed) = (u64_at(8) as usize, u64_at(16) as usize, u64_at(24));
        let len = vocab
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| EmbedError::CorruptModel("table size overflows".into()))?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != len {
            return Err(EmbedError::CorruptModel(format!(
                "expected {len} table bytes, found {}",
                body.len()
            )));
        }
        let weights = body
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        Self::from_weights(vocab, dim, seed, weights)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        Self::read_from(io::BufReader::new(fs::File::open(path)?))
    }
}

const MODEL_MAGIC: &[u8; 4] = b"EFTE";
const MODEL_VERSION: u32 = 1;
