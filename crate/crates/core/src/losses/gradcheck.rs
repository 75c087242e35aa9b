use serde::Serialize;

use super::cosent::ordered_pairs;
use super::infonce::{cls_items, item_vec, retrieval_items};
use super::{
    cls_loss, cosent_loss, retrieval_loss, EmbeddedBatch, Grads, LossConfig, LossError, LossKind, ScoredPairBatch,
};
use crate::scalar::{dot, log_sum_exp, Scalar};

/// What to differentiate: an embedded batch under one of the InfoNCE
/// kernels, or a list of pair similarities under Cosent.
#[derive(Debug, Clone, Copy)]
pub enum GradCheckTarget<'a, T> {
    Retrieval(&'a EmbeddedBatch<T>),
    Cls(&'a EmbeddedBatch<T>),
    Cosent(&'a ScoredPairBatch<T>),
}

impl<T> GradCheckTarget<'_, T> {
    pub fn kind(&self) -> LossKind {
        match self {
            GradCheckTarget::Retrieval(_) => LossKind::Retrieval,
            GradCheckTarget::Cls(_) => LossKind::Cls,
            GradCheckTarget::Cosent(_) => LossKind::Cosent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub kind: LossKind,
    /// max over coordinates of |a - b| / max(|a|, |b|, 1e-8)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
}

/// Compare analytic gradients against central finite differences on every
/// input coordinate.
///
/// Each probe moves one coordinate to `x - ε` and `x + ε`. The loss change
/// between the two probes is evaluated in difference form,
/// `log1p(Σ_k softmax_k · expm1(Δz_k)) - Δz_positive`, where each logit
/// change `Δz_k` only picks up the coordinate that moved. That is the plain
/// difference of the two loss values, minus the cancellation that would
/// otherwise swamp near-zero gradient coordinates.
pub fn grad_check<T: Scalar>(
    target: GradCheckTarget<'_, T>,
    cfg: &LossConfig<T>,
    epsilon: T,
) -> Result<GradCheckReport, LossError> {
    if !(epsilon > T::zero() && epsilon <= T::lit(1e-3)) {
        return Err(LossError::InvalidEpsilon);
    }
    let mut acc = ErrorAccumulator::default();
    match target {
        GradCheckTarget::Cosent(pairs) => {
            let analytic = match cosent_loss(pairs, cfg)?.grads {
                Grads::Sims(g) => g,
                Grads::Embeddings(_) => unreachable!("cosent returns sim gradients"),
            };
            let ordered = ordered_pairs(&pairs.scores);
            let mut lo = pairs.sims.clone();
            let mut hi = pairs.sims.clone();
            for (k, &a) in analytic.iter().enumerate() {
                let orig = pairs.sims[k];
                lo[k] = orig - epsilon;
                hi[k] = orig + epsilon;
                let delta = cosent_delta(&lo, &hi, &ordered, cfg.temperature);
                acc.push(a, delta / (hi[k] - lo[k]));
                lo[k] = orig;
                hi[k] = orig;
            }
        }
        GradCheckTarget::Retrieval(batch) | GradCheckTarget::Cls(batch) => {
            let is_cls = matches!(target, GradCheckTarget::Cls(_));
            let out = if is_cls {
                cls_loss(batch, cfg)
            } else {
                retrieval_loss(batch, cfg)
            }?;
            let grads = match out.grads {
                Grads::Embeddings(g) => g,
                Grads::Sims(_) => unreachable!("infonce kernels return embedding gradients"),
            };
            let mut lo = batch.clone();
            let mut hi = batch.clone();
            let mut check = |slot: Slot, coord: usize, a: T| {
                let orig = *slot.get(&mut lo, coord);
                *slot.get(&mut lo, coord) = orig - epsilon;
                *slot.get(&mut hi, coord) = orig + epsilon;
                let h = *slot.get(&mut hi, coord) - *slot.get(&mut lo, coord);
                let delta = infonce_delta(&lo, &hi, cfg, is_cls);
                acc.push(a, delta / h);
                *slot.get(&mut lo, coord) = orig;
                *slot.get(&mut hi, coord) = orig;
            };
            for (i, g) in grads.queries.iter().enumerate() {
                for (c, &a) in g.iter().enumerate() {
                    check(Slot::Query(i), c, a);
                }
            }
            for (i, g) in grads.positives.iter().enumerate() {
                for (c, &a) in g.iter().enumerate() {
                    check(Slot::Positive(i), c, a);
                }
            }
            for (i, negs) in grads.negatives.iter().enumerate() {
                for (m, g) in negs.iter().enumerate() {
                    for (c, &a) in g.iter().enumerate() {
                        check(Slot::Negative(i, m), c, a);
                    }
                }
            }
        }
    }
    Ok(GradCheckReport {
        kind: target.kind(),
        max_rel_error: acc.max_rel,
        max_abs_error: acc.max_abs,
        coordinates: acc.count,
    })
}

/// `a_hi·b_hi - a_lo·b_lo`, summed per coordinate as
/// `(a_hi - a_lo)·b_hi + a_lo·(b_hi - b_lo)` so unchanged coordinates add
/// exactly zero.
fn dot_delta<T: Scalar>(a_hi: &[T], b_hi: &[T], a_lo: &[T], b_lo: &[T]) -> T {
    let mut acc = T::zero();
    for d in 0..a_hi.len() {
        acc += (a_hi[d] - a_lo[d]) * b_hi[d] + a_lo[d] * (b_hi[d] - b_lo[d]);
    }
    acc
}

/// `L(hi) - L(lo)` for the InfoNCE kernels. Both batches carry the same
/// labels, hence the same denominators.
fn infonce_delta<T: Scalar>(lo: &EmbeddedBatch<T>, hi: &EmbeddedBatch<T>, cfg: &LossConfig<T>, is_cls: bool) -> T {
    let inv_tau = T::one() / cfg.temperature;
    let n = lo.queries.len();
    let mut items = Vec::new();
    let mut logits = Vec::new();
    let mut total = T::zero();
    for i in 0..n {
        match (is_cls, &lo.class_labels, &lo.neg_class_labels) {
            (true, Some(l), Some(nl)) => cls_items(lo, l, nl, cfg, i, &mut items),
            _ => retrieval_items(lo, cfg, i, &mut items),
        }
        let (q_lo, q_hi) = (&lo.queries[i], &hi.queries[i]);
        logits.clear();
        logits.extend(items.iter().map(|&it| dot(q_lo, item_vec(lo, it)) * inv_tau));
        let lse = log_sum_exp(&logits);
        let mut weighted = T::zero();
        let mut positive_shift = T::zero();
        for (k, &it) in items.iter().enumerate() {
            let shift = dot_delta(q_hi, item_vec(hi, it), q_lo, item_vec(lo, it)) * inv_tau;
            if k == 0 {
                positive_shift = shift;
            }
            weighted += (logits[k] - lse).exp() * shift.exp_m1();
        }
        total += weighted.ln_1p() - positive_shift;
    }
    total / T::from_usize(n).expect("batch size fits scalar")
}

/// `L(hi) - L(lo)` for Cosent over the given (winner, loser) pairs.
fn cosent_delta<T: Scalar>(lo: &[T], hi: &[T], ordered: &[(usize, usize)], tau: T) -> T {
    let inv_tau = T::one() / tau;
    let mut exponents = vec![T::zero()];
    exponents.extend(ordered.iter().map(|&(a, b)| (lo[b] - lo[a]) * inv_tau));
    let lse = log_sum_exp(&exponents);
    let mut weighted = T::zero();
    for (&(a, b), &e) in ordered.iter().zip(&exponents[1..]) {
        let shift = ((hi[b] - lo[b]) - (hi[a] - lo[a])) * inv_tau;
        weighted += (e - lse).exp() * shift.exp_m1();
    }
    weighted.ln_1p()
}

#[derive(Clone, Copy)]
enum Slot {
    Query(usize),
    Positive(usize),
    Negative(usize, usize),
}

impl Slot {
    fn get<T>(self, batch: &mut EmbeddedBatch<T>, coord: usize) -> &mut T {
        match self {
            Slot::Query(i) => &mut batch.queries[i][coord],
            Slot::Positive(i) => &mut batch.positives[i][coord],
            Slot::Negative(i, m) => &mut batch.negatives[i][m][coord],
        }
    }
}

#[derive(Default)]
struct ErrorAccumulator {
    max_rel: f64,
    max_abs: f64,
    count: usize,
}

impl ErrorAccumulator {
    fn push<T: Scalar>(&mut self, analytic: T, numeric: T) {
        let a = analytic.to_f64_lossy();
        let b = numeric.to_f64_lossy();
        let abs = (a - b).abs();
        let rel = abs / a.abs().max(b.abs()).max(1e-8);
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
        self.count += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_epsilon() {
        let pairs = ScoredPairBatch::new(vec![0.1, 0.2], vec![1, 0]);
        let cfg = LossConfig::default();
        for eps in [0.0, -1e-5, 1e-2] {
            assert_eq!(
                grad_check(GradCheckTarget::Cosent(&pairs), &cfg, eps).unwrap_err(),
                LossError::InvalidEpsilon
            );
        }
    }

    #[test]
    fn cosent_small_case() {
        let pairs = ScoredPairBatch::new(vec![0.3, 0.5, -0.1, 0.2], vec![2, 1, 1, 0]);
        let report = grad_check(
            GradCheckTarget::Cosent(&pairs),
            &LossConfig::with_temperature(1.0),
            1e-5,
        )
        .unwrap();
        assert_eq!(report.coordinates, 4);
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn difference_form_matches_plain_difference() {
        let lo = [0.3, 0.5, -0.1];
        let hi = [0.3, 0.6, -0.1];
        let pairs = |s: &[f64]| ScoredPairBatch::new(s.to_vec(), vec![2, 1, 0]);
        let cfg = LossConfig::with_temperature(0.5);
        let plain = cosent_loss(&pairs(&hi), &cfg).unwrap().value - cosent_loss(&pairs(&lo), &cfg).unwrap().value;
        let delta = cosent_delta(&lo, &hi, &ordered_pairs(&[2, 1, 0]), 0.5);
        assert!((plain - delta).abs() < 1e-14);
    }
}
