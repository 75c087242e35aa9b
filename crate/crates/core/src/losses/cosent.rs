use super::{Grads, LossConfig, LossError, LossOutput, ScoredPairBatch};
use crate::scalar::{log_sum_exp, Scalar};

/// Cosent ranking loss
/// `log(1 + Σ_{score(a) > score(b)} exp((sim_b - sim_a) / τ))`.
///
/// The sum runs over ordered pairs of entries whose ground-truth scores are
/// strictly ordered. Gradients are with respect to `pairs.sims`.
pub fn cosent_loss<T: Scalar>(pairs: &ScoredPairBatch<T>, cfg: &LossConfig<T>) -> Result<LossOutput<T>, LossError> {
    pairs.validate()?;
    cfg.check()?;
    let inv_tau = T::one() / cfg.temperature;
    let sims = &pairs.sims;

    let ordered = ordered_pairs(&pairs.scores);
    // the leading 0 is the "1 +" term
    let mut exponents = vec![T::zero()];
    exponents.extend(ordered.iter().map(|&(a, b)| (sims[b] - sims[a]) * inv_tau));
    let value = log_sum_exp(&exponents);

    let mut grads = vec![T::zero(); sims.len()];
    for (&(a, b), &e) in ordered.iter().zip(&exponents[1..]) {
        let g = (e - value).exp() * inv_tau;
        grads[b] += g;
        grads[a] -= g;
    }
    Ok(LossOutput {
        value,
        per_instance: Vec::new(),
        grads: Grads::Sims(grads),
    })
}

/// (winner, loser) index pairs with strictly ordered scores.
pub(crate) fn ordered_pairs(scores: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (a, &sa) in scores.iter().enumerate() {
        for (b, &sb) in scores.iter().enumerate() {
            if sa > sb {
                out.push((a, b));
            }
        }
    }
    out
}

/// Number of strictly ordered (winner, loser) pairs, i.e. exponent terms.
pub fn cosent_term_count(scores: &[u8]) -> usize {
    scores.iter().map(|&a| scores.iter().filter(|&&b| a > b).count()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_give_zero() {
        let pairs = ScoredPairBatch::new(vec![0.9, -0.2, 0.4], vec![1, 1, 1]);
        let out = cosent_loss(&pairs, &LossConfig::default()).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grads.sims().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_entries_closed_form() {
        let pairs = ScoredPairBatch::new(vec![0.9, 0.3], vec![1, 0]);
        let out = cosent_loss(&pairs, &LossConfig::with_temperature(1.0)).unwrap();
        let expected = (1.0 + (-0.6f64).exp()).ln();
        assert!((out.value - expected).abs() < 1e-12);
        assert!((out.value - 0.437488).abs() < 1e-6);
    }

    #[test]
    fn three_tiers_have_three_terms() {
        assert_eq!(cosent_term_count(&[2, 1, 0]), 3);
        assert_eq!(cosent_term_count(&[1, 1]), 0);
        assert_eq!(cosent_term_count(&[]), 0);
    }

    #[test]
    fn empty_is_zero_and_mismatch_errors() {
        let out = cosent_loss(&ScoredPairBatch::<f64>::new(vec![], vec![]), &LossConfig::default()).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(matches!(
            cosent_loss(&ScoredPairBatch::new(vec![0.1], vec![]), &LossConfig::<f64>::default()),
            Err(LossError::ShapeMismatch(_))
        ));
    }
}
