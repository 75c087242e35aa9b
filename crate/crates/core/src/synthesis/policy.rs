//! How accepted synthetic items re-enter each task's data.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ScoredPair, TrainingSample};
use crate::transform::ClsDatasetView;

/// Datasets below this many samples are paraphrased and augmented.
pub const DEFAULT_EXPANSION_THRESHOLD: usize = 60_000;

pub fn eligible_for_expansion(dataset_size: usize, threshold: usize) -> bool {
    dataset_size < threshold
}

/// Retrieval: synthetic samples are appended after the originals.
pub fn apply_retrieval_policy(originals: Vec<TrainingSample>, generated: Vec<TrainingSample>) -> Vec<TrainingSample> {
    let mut out = originals;
    out.extend(generated);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliPolicy {
    /// chance that a rewrite produces a substituted duplicate
    pub duplication_probability: f64,
    pub seed: u64,
}

impl Default for NliPolicy {
    fn default() -> Self {
        NliPolicy {
            duplication_probability: 1.0,
            seed: 0,
        }
    }
}

/// NLI: for each `(original, rewrite)` sentence pair, with probability
/// `duplication_probability` pick one existing pair containing `original`
/// (uniformly, seeded), duplicate it and substitute the rewrite. Duplicates
/// are appended after all original pairs.
pub fn apply_nli_policy(pairs: Vec<ScoredPair>, rewrites: &[(String, String)], policy: &NliPolicy) -> Vec<ScoredPair> {
    let mut by_sentence: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        by_sentence.entry(p.text_a.as_str()).or_default().push(i);
        if p.text_b != p.text_a {
            by_sentence.entry(p.text_b.as_str()).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut extra = Vec::new();
    for (original, rewrite) in rewrites {
        let Some(holders) = by_sentence.get(original.as_str()) else {
            continue;
        };
        if rng.random::<f64>() >= policy.duplication_probability {
            continue;
        }
        let mut dup = pairs[holders[rng.random_range(0..holders.len())]].clone();
        if dup.text_a == *original {
            dup.text_a = rewrite.clone();
        }
        if dup.text_b == *original {
            dup.text_b = rewrite.clone();
        }
        extra.push(dup);
    }
    let mut out = pairs;
    out.extend(extra);
    out
}

/// CLS: each `(entry index, rewrite)` adds the rewrite under the entry's
/// label. Run the result through `transform_cls` again to build samples.
pub fn apply_cls_policy(view: &ClsDatasetView, rewrites: &[(usize, String)]) -> ClsDatasetView {
    let mut out = view.clone();
    for (entry, text) in rewrites {
        out.push(text.clone(), view.label_of(*entry).to_string());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retrieval_appends() {
        let originals: Vec<_> = (0..10)
            .map(|i| TrainingSample::retrieval("d", format!("q{i}"), "p"))
            .collect();
        let generated: Vec<_> = (0..5)
            .map(|i| TrainingSample::retrieval("d", format!("g{i}"), "p"))
            .collect();
        let out = apply_retrieval_policy(originals.clone(), generated);
        assert_eq!(out.len(), 15);
        assert_eq!(out[..10], originals[..]);
    }

    #[test]
    fn nli_duplicates_with_substitution() {
        let pairs = vec![
            ScoredPair::new("snli", "s1", "s2", 1),
            ScoredPair::new("snli", "s3", "s4", 0),
        ];
        let out = apply_nli_policy(pairs.clone(), &[("s1".into(), "s1'".into())], &NliPolicy::default());
        assert_eq!(out.len(), 3);
        assert!(out.contains(&pairs[0]));
        assert_eq!(out[2], ScoredPair::new("snli", "s1'", "s2", 1));

        let never = NliPolicy {
            duplication_probability: 0.0,
            seed: 0,
        };
        assert_eq!(
            apply_nli_policy(pairs.clone(), &[("s1".into(), "x".into())], &never),
            pairs
        );
    }

    #[test]
    fn cls_keeps_labels() {
        let view = ClsDatasetView::from_entries("yelp", [("great food", "pos"), ("awful", "neg")]);
        let out = apply_cls_policy(&view, &[(0, "the food was great".into())]);
        assert_eq!(out.entries().len(), 3);
        assert_eq!(out.label_of(2), "pos");
    }

    #[test]
    fn eligibility_threshold() {
        assert!(eligible_for_expansion(59_999, DEFAULT_EXPANSION_THRESHOLD));
        assert!(!eligible_for_expansion(60_000, DEFAULT_EXPANSION_THRESHOLD));
    }
}
