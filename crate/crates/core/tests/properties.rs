use proptest::prelude::*;

use embforge_core::corpus::{ScoredPair, TrainingSample};
use embforge_core::losses::{cls_loss, cosent_loss, retrieval_loss, EmbeddedBatch, LossConfig, ScoredPairBatch};
use embforge_core::mining::dedup;
use embforge_core::sampler::{
    compute_two_stage_plan, compute_weights, next_batch, BatchSizes, DatasetMeta, LossFamily, SamplerState,
};
use embforge_core::synthesis::{apply_nli_policy, NliPolicy};

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / n).collect()
}

prop_compose! {
    fn batch(max_n: usize, max_m: usize, d: usize)
        (n in 1..=max_n, m in 0..=max_m)
        (qs in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, d), n),
         ps in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, d), n),
         ns in prop::collection::vec(prop::collection::vec(prop::collection::vec(-1.0..1.0f64, d), m), n),
         labels in prop::collection::vec(0..3u8, n),
         neg_labels in prop::collection::vec(prop::collection::vec(0..3u8, m), n))
        -> EmbeddedBatch<f64>
    {
        let qs = qs.into_iter().map(unit).collect();
        let ps = ps.into_iter().map(unit).collect();
        let ns = ns.into_iter().map(|r| r.into_iter().map(unit).collect()).collect();
        EmbeddedBatch::new(qs, ps, ns).with_labels(
            labels.iter().map(|l| l.to_string()).collect(),
            neg_labels.iter().map(|r| r.iter().map(|l| l.to_string()).collect()).collect(),
        )
    }
}

fn permute(b: &EmbeddedBatch<f64>, order: &[usize]) -> EmbeddedBatch<f64> {
    let pick = |v: &Vec<Vec<f64>>| order.iter().map(|&i| v[i].clone()).collect();
    let mut out = EmbeddedBatch::new(
        pick(&b.queries),
        pick(&b.positives),
        order.iter().map(|&i| b.negatives[i].clone()).collect(),
    );
    out.class_labels = b
        .class_labels
        .as_ref()
        .map(|l| order.iter().map(|&i| l[i].clone()).collect());
    out.neg_class_labels = b
        .neg_class_labels
        .as_ref()
        .map(|l| order.iter().map(|&i| l[i].clone()).collect());
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_nonnegative_and_permutation_invariant(b in batch(6, 3, 5), tau in 0.02..1.0f64, rot in 0usize..6) {
        let cfg = LossConfig::with_temperature(tau);
        let order: Vec<usize> = (0..b.len()).map(|i| (i + rot) % b.len()).collect();
        let p = permute(&b, &order);
        for f in [retrieval_loss::<f64>, cls_loss::<f64>] {
            let a = f(&b, &cfg).unwrap();
            let c = f(&p, &cfg).unwrap();
            prop_assert!(a.value >= 0.0 && a.is_finite());
            prop_assert!((a.value - c.value).abs() <= 1e-12 * a.value.abs().max(1.0));
        }
    }

    #[test]
    fn raising_the_positive_lowers_the_retrieval_loss(b in batch(4, 2, 4)) {
        let cfg = LossConfig::with_temperature(0.5);
        // one instance without negatives has nothing to contrast against
        prop_assume!(b.len() > 1 || !b.negatives[0].is_empty());
        let before = retrieval_loss(&b, &cfg).unwrap().value;
        let mut closer = b.clone();
        // move positive 0 halfway towards query 0
        let mixed: Vec<f64> = closer.positives[0].iter().zip(&closer.queries[0]).map(|(p, q)| 0.5 * (p + q)).collect();
        let old = b.positives[0].iter().zip(&b.queries[0]).map(|(p, q)| p * q).sum::<f64>();
        closer.positives[0] = unit(mixed);
        let new = closer.positives[0].iter().zip(&closer.queries[0]).map(|(p, q)| p * q).sum::<f64>();
        prop_assume!(new > old + 1e-6);
        prop_assert!(retrieval_loss(&closer, &cfg).unwrap().value < before);
    }

    #[test]
    fn cosent_ignores_pair_order(
        entries in prop::collection::vec((-1.0..1.0f64, 0..4u8), 1..10),
        rot in 0usize..10,
    ) {
        let cfg = LossConfig::with_temperature(0.05);
        let (sims, scores): (Vec<f64>, Vec<u8>) = entries.iter().cloned().unzip();
        let k = rot % entries.len();
        let (s2, c2): (Vec<f64>, Vec<u8>) = entries[k..].iter().chain(&entries[..k]).cloned().unzip();
        let a = cosent_loss(&ScoredPairBatch::new(sims, scores), &cfg).unwrap().value;
        let b = cosent_loss(&ScoredPairBatch::new(s2, c2), &cfg).unwrap().value;
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn weights_normalise_and_ignore_scale(
        sizes in prop::collection::vec(1u64..100_000, 1..12),
        alpha in 0.0..2.0f64,
        c in 1u64..50,
    ) {
        let w = compute_weights(&sizes, alpha).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let scaled: Vec<u64> = sizes.iter().map(|s| s * c).collect();
        let w2 = compute_weights(&scaled, alpha).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_stage_sides_sum_to_eta(
        ret in prop::collection::vec(1u64..50_000, 1..6),
        non in prop::collection::vec(1u64..50_000, 1..6),
        eta in 0.05..0.95f64,
    ) {
        let mut metas: Vec<DatasetMeta> = ret.iter().enumerate()
            .map(|(i, &s)| DatasetMeta::new(format!("r{i}"), s, true, LossFamily::Infonce)).collect();
        metas.extend(non.iter().enumerate().map(|(i, &s)| DatasetMeta::new(format!("n{i}"), s, false, LossFamily::Cosent)));
        let plan = compute_two_stage_plan(&metas, 0.5, eta).unwrap();
        prop_assert!((plan.ratio_sum() - 1.0).abs() < 1e-12);
        prop_assert!((plan.retrieval_sum() - eta).abs() < 1e-12);
    }

    #[test]
    fn sampler_visits_every_record_once_per_cycle(size in 1u64..40, batch_size in 1usize..16, seed in any::<u64>()) {
        let metas = [DatasetMeta::new("only", size, true, LossFamily::Infonce)];
        let plan = embforge_core::sampler::compute_stage_one_plan::<f64>(&metas, 0.5).unwrap();
        let sizes = BatchSizes { infonce: batch_size, cosent: batch_size };
        let mut state = SamplerState::new(seed);
        let mut seen: Vec<u64> = Vec::new();
        while (seen.len() as u64) < size * 2 {
            seen.extend(next_batch(&plan, &mut state, &sizes).indices);
        }
        let cycle: Vec<u64> = (0..size).collect();
        prop_assert_eq!(&seen[..size as usize], &cycle[..]);
        prop_assert_eq!(&seen[size as usize..2 * size as usize], &cycle[..]);
    }

    #[test]
    fn dedup_is_idempotent_and_keeps_first(pairs in prop::collection::vec((0..6u8, 0..6u8), 0..40)) {
        let samples: Vec<TrainingSample> = pairs.iter()
            .map(|(q, p)| TrainingSample::retrieval("d", format!("q{q}"), format!("p{p}")))
            .collect();
        let once: Vec<_> = dedup(samples.clone()).collect();
        let twice: Vec<_> = dedup(once.clone()).collect();
        prop_assert_eq!(&once, &twice);
        let mut firsts = Vec::new();
        for s in &samples {
            if !firsts.iter().any(|f: &TrainingSample| f.query == s.query && f.positive == s.positive) {
                firsts.push(s.clone());
            }
        }
        prop_assert_eq!(once, firsts);
    }

    #[test]
    fn nli_policy_only_appends(n in 1usize..10, picks in prop::collection::vec(0usize..10, 0..8), seed in any::<u64>()) {
        let pairs: Vec<ScoredPair> = (0..n).map(|i| ScoredPair::new("nli", format!("a{i}"), format!("b{i}"), (i % 3) as u8)).collect();
        let rewrites: Vec<(String, String)> = picks.iter().map(|&k| (format!("a{}", k % n), format!("a{k}'"))).collect();
        let out = apply_nli_policy(pairs.clone(), &rewrites, &NliPolicy { duplication_probability: 1.0, seed });
        prop_assert_eq!(&out[..n], &pairs[..]);
        prop_assert_eq!(out.len(), n + rewrites.len());
        for (dup, (_, rewrite)) in out[n..].iter().zip(&rewrites) {
            prop_assert_eq!(&dup.text_a, rewrite);
        }
    }
}
