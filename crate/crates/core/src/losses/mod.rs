//! Contrastive loss kernels with closed-form gradients.
//!
//! All embeddings are expected to be unit-norm, so cosine similarity is the
//! plain dot product; the kernels never renormalize, which keeps the analytic
//! gradients exact for arbitrary (perturbed) inputs.

mod cosent;
mod gradcheck;
mod infonce;

pub use cosent::{cosent_loss, cosent_term_count};
pub use gradcheck::{grad_check, GradCheckReport, GradCheckTarget};
pub use infonce::{cls_loss, retrieval_loss};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{l2_norm, Scalar};

/// Default similarity temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("classification loss needs class labels for queries and negatives")]
    MissingLabels,
    #[error("temperature must be positive")]
    NonPositiveTemperature,
    #[error("finite-difference step must lie in (0, 1e-3]")]
    InvalidEpsilon,
}

/// Which loss a batch is fed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Retrieval,
    Cosent,
    Cls,
}

/// Which negatives enter instance `i`'s denominator in the retrieval loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSharing {
    /// every negative of every instance in the batch
    #[default]
    InBatch,
    /// only the instance's own negatives
    PerInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig<T> {
    pub temperature: T,
    /// Add other queries of the batch as negatives (retrieval loss).
    pub include_query_query: bool,
    pub negative_sharing: NegativeSharing,
    /// Drop same-class in-batch terms from the CLS denominator.
    pub cls_masking: bool,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig {
            temperature: T::lit(DEFAULT_TEMPERATURE),
            include_query_query: true,
            negative_sharing: NegativeSharing::InBatch,
            cls_masking: true,
        }
    }
}

impl<T: Scalar> LossConfig<T> {
    pub fn with_temperature(temperature: T) -> Self {
        LossConfig {
            temperature,
            ..Self::default()
        }
    }

    pub(crate) fn check(&self) -> Result<(), LossError> {
        if self.temperature > T::zero() && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(LossError::NonPositiveTemperature)
        }
    }
}

/// Embedded texts of one single-dataset batch.
///
/// `negatives[i]` holds instance `i`'s negatives; counts may differ between
/// instances. For classification batches `class_labels[i]` is the class of
/// query `i` (and of its positive) and `neg_class_labels[i][n]` the class of
/// `negatives[i][n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedBatch<T> {
    pub queries: Vec<Vec<T>>,
    pub positives: Vec<Vec<T>>,
    #[serde(default)]
    pub negatives: Vec<Vec<Vec<T>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neg_class_labels: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub dataset_name: String,
}

impl<T: Scalar> EmbeddedBatch<T> {
    pub fn new(queries: Vec<Vec<T>>, positives: Vec<Vec<T>>, negatives: Vec<Vec<Vec<T>>>) -> Self {
        EmbeddedBatch {
            queries,
            positives,
            negatives,
            class_labels: None,
            neg_class_labels: None,
            dataset_name: String::new(),
        }
    }

    pub fn with_labels(mut self, class_labels: Vec<String>, neg_class_labels: Vec<Vec<String>>) -> Self {
        self.class_labels = Some(class_labels);
        self.neg_class_labels = Some(neg_class_labels);
        self
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.queries.first().map_or(0, Vec::len)
    }

    /// Instance `i`'s negatives; empty when the batch carries none.
    pub(crate) fn negatives_of(&self, i: usize) -> &[Vec<T>] {
        self.negatives.get(i).map_or(&[], Vec::as_slice)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let n = self.queries.len();
        if n == 0 {
            return Err(LossError::EmptyBatch);
        }
        if self.positives.len() != n {
            return Err(LossError::ShapeMismatch(format!(
                "{n} queries but {} positives",
                self.positives.len()
            )));
        }
        if !self.negatives.is_empty() && self.negatives.len() != n {
            return Err(LossError::ShapeMismatch(format!(
                "{n} queries but {} negative lists",
                self.negatives.len()
            )));
        }
        let d = self.dim();
        let all = self
            .queries
            .iter()
            .chain(&self.positives)
            .chain(self.negatives.iter().flatten());
        for v in all {
            if v.len() != d {
                return Err(LossError::ShapeMismatch(format!(
                    "vector of dim {} in a dim-{d} batch",
                    v.len()
                )));
            }
        }
        if let Some(labels) = &self.class_labels {
            if labels.len() != n {
                return Err(LossError::ShapeMismatch("class_labels length".into()));
            }
        }
        if let Some(labels) = &self.neg_class_labels {
            if labels.len() != n
                || labels
                    .iter()
                    .enumerate()
                    .any(|(i, l)| l.len() != self.negatives_of(i).len())
            {
                return Err(LossError::ShapeMismatch("neg_class_labels shape".into()));
            }
        }
        Ok(())
    }

    /// True when every vector has unit L2 norm within `tol`.
    pub fn is_unit_norm(&self, tol: T) -> bool {
        self.queries
            .iter()
            .chain(&self.positives)
            .chain(self.negatives.iter().flatten())
            .all(|v| (l2_norm(v) - T::one()).abs() <= tol)
    }

    pub(crate) fn zeros_like(&self) -> BatchGrads<T> {
        let zero = |vs: &Vec<Vec<T>>| vs.iter().map(|v| vec![T::zero(); v.len()]).collect();
        BatchGrads {
            queries: zero(&self.queries),
            positives: zero(&self.positives),
            negatives: self.negatives.iter().map(zero).collect(),
        }
    }
}

/// Similarities of scored text pairs with their ordinal labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPairBatch<T> {
    pub sims: Vec<T>,
    pub scores: Vec<u8>,
}

impl<T: Scalar> ScoredPairBatch<T> {
    pub fn new(sims: Vec<T>, scores: Vec<u8>) -> Self {
        ScoredPairBatch { sims, scores }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.sims.len() != self.scores.len() {
            return Err(LossError::ShapeMismatch(format!(
                "{} sims but {} scores",
                self.sims.len(),
                self.scores.len()
            )));
        }
        Ok(())
    }
}

/// Gradients with the same layout as the batch's embedding arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchGrads<T> {
    pub queries: Vec<Vec<T>>,
    pub positives: Vec<Vec<T>>,
    pub negatives: Vec<Vec<Vec<T>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grads<T> {
    Embeddings(BatchGrads<T>),
    Sims(Vec<T>),
}

impl<T> Grads<T> {
    pub fn embeddings(&self) -> Option<&BatchGrads<T>> {
        match self {
            Grads::Embeddings(g) => Some(g),
            Grads::Sims(_) => None,
        }
    }

    pub fn sims(&self) -> Option<&[T]> {
        match self {
            Grads::Sims(g) => Some(g),
            Grads::Embeddings(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossOutput<T> {
    pub value: T,
    /// Per-instance terms before averaging (InfoNCE kernels only).
    pub per_instance: Vec<T>,
    pub grads: Grads<T>,
}

impl<T: Scalar> LossOutput<T> {
    pub fn is_finite(&self) -> bool {
        let finite = |vs: &[Vec<T>]| vs.iter().flatten().all(|x| x.is_finite());
        self.value.is_finite()
            && match &self.grads {
                Grads::Sims(g) => g.iter().all(|x| x.is_finite()),
                Grads::Embeddings(g) => {
                    finite(&g.queries) && finite(&g.positives) && g.negatives.iter().all(|n| finite(n))
                }
            }
    }
}
