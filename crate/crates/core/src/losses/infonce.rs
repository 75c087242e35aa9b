use super::{BatchGrads, EmbeddedBatch, Grads, LossConfig, LossError, LossOutput, NegativeSharing};
use crate::scalar::{axpy, dot, log_sum_exp, sum, Scalar};

/// A vector in the batch that appears in some instance's denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Item {
    Positive(usize),
    Negative(usize, usize),
    Query(usize),
}

pub(crate) fn item_vec<T>(batch: &EmbeddedBatch<T>, item: Item) -> &[T] {
    match item {
        Item::Positive(i) => &batch.positives[i],
        Item::Negative(j, n) => &batch.negatives[j][n],
        Item::Query(j) => &batch.queries[j],
    }
}

fn item_grad<T>(grads: &mut BatchGrads<T>, item: Item) -> &mut [T] {
    match item {
        Item::Positive(i) => &mut grads.positives[i],
        Item::Negative(j, n) => &mut grads.negatives[j][n],
        Item::Query(j) => &mut grads.queries[j],
    }
}

/// Softmax cross-entropy of query `i` against `items`, whose first entry is
/// the positive. Accumulates `scale`-weighted gradients and returns the
/// unscaled instance loss.
fn instance_loss<T: Scalar>(
    batch: &EmbeddedBatch<T>,
    grads: &mut BatchGrads<T>,
    i: usize,
    items: &[Item],
    cfg: &LossConfig<T>,
    scale: T,
    logits: &mut Vec<T>,
) -> T {
    let query = &batch.queries[i];
    let inv_tau = T::one() / cfg.temperature;
    logits.clear();
    logits.extend(items.iter().map(|&it| dot(query, item_vec(batch, it)) * inv_tau));
    let lse = log_sum_exp(logits);
    let loss = lse - logits[0];

    let mut dq = vec![T::zero(); query.len()];
    for (k, &it) in items.iter().enumerate() {
        let mut w = (logits[k] - lse).exp();
        if k == 0 {
            w -= T::one();
        }
        let g = w * scale * inv_tau;
        if g == T::zero() {
            continue;
        }
        axpy(&mut dq, g, item_vec(batch, it));
        axpy(item_grad(grads, it), g, query);
    }
    axpy(&mut grads.queries[i], T::one(), &dq);
    loss
}

/// Denominator of retrieval instance `i`, positive first.
pub(crate) fn retrieval_items<T>(batch: &EmbeddedBatch<T>, cfg: &LossConfig<T>, i: usize, items: &mut Vec<Item>) {
    let n = batch.queries.len();
    items.clear();
    items.push(Item::Positive(i));
    let owners = match cfg.negative_sharing {
        NegativeSharing::InBatch => 0..n,
        NegativeSharing::PerInstance => i..i + 1,
    };
    for j in owners {
        let count = batch.negatives.get(j).map_or(0, Vec::len);
        items.extend((0..count).map(|m| Item::Negative(j, m)));
    }
    if cfg.include_query_query {
        items.extend((0..n).filter(|&j| j != i).map(Item::Query));
    }
}

/// Denominator of CLS instance `i` after masking, positive first.
pub(crate) fn cls_items<T>(
    batch: &EmbeddedBatch<T>,
    labels: &[String],
    neg_labels: &[Vec<String>],
    cfg: &LossConfig<T>,
    i: usize,
    items: &mut Vec<Item>,
) {
    let n = batch.queries.len();
    let anchor = labels[i].as_str();
    let keep = |other: &str| !cfg.cls_masking || anchor != other;
    let negs_of = |j: usize| {
        (0..batch.negatives.get(j).map_or(0, Vec::len))
            .filter(move |&m| keep(&neg_labels[j][m]))
            .map(move |m| Item::Negative(j, m))
    };
    items.clear();
    items.push(Item::Positive(i));
    items.extend(negs_of(i));
    items.extend((0..n).filter(|&j| j != i && keep(&labels[j])).map(Item::Query));
    for j in (0..n).filter(|&j| j != i) {
        items.extend(negs_of(j));
    }
}

fn finish<T: Scalar>(per_instance: Vec<T>, grads: BatchGrads<T>) -> LossOutput<T> {
    let n = T::from_usize(per_instance.len()).expect("batch size fits scalar");
    let value = sum(per_instance.iter().copied()) / n;
    LossOutput {
        value,
        per_instance,
        grads: Grads::Embeddings(grads),
    }
}

/// InfoNCE over (positive, negatives, other queries).
///
/// Instance `i` contributes
/// `-log(e^{s(q_i,p_i)/τ} / (e^{s(q_i,p_i)/τ} + Σ e^{s(q_i,n)/τ} + Σ_{j≠i} e^{s(q_i,q_j)/τ}))`
/// where `n` ranges over the negatives selected by `cfg.negative_sharing`
/// and the query-query sum is present iff `cfg.include_query_query`.
/// Class labels, if any, are ignored.
pub fn retrieval_loss<T: Scalar>(batch: &EmbeddedBatch<T>, cfg: &LossConfig<T>) -> Result<LossOutput<T>, LossError> {
    batch.validate()?;
    cfg.check()?;
    let n = batch.len();
    let scale = T::one() / T::from_usize(n).expect("batch size fits scalar");
    let mut grads = batch.zeros_like();
    let mut per_instance = Vec::with_capacity(n);
    let mut items = Vec::new();
    let mut logits = Vec::new();
    for i in 0..n {
        retrieval_items(batch, cfg, i, &mut items);
        per_instance.push(instance_loss(batch, &mut grads, i, &items, cfg, scale, &mut logits));
    }
    Ok(finish(per_instance, grads))
}

/// Classification InfoNCE with false-negative masking.
///
/// The denominator of instance `i` holds its positive plus its own
/// negatives, every other query `t_j`, and every other instance's negatives;
/// any of those sharing query `i`'s class is dropped (when
/// `cfg.cls_masking`). Dropped terms are never evaluated, so they carry
/// exactly zero gradient.
pub fn cls_loss<T: Scalar>(batch: &EmbeddedBatch<T>, cfg: &LossConfig<T>) -> Result<LossOutput<T>, LossError> {
    batch.validate()?;
    cfg.check()?;
    let (labels, neg_labels) = match (&batch.class_labels, &batch.neg_class_labels) {
        (Some(l), Some(nl)) => (l, nl),
        _ => return Err(LossError::MissingLabels),
    };
    let n = batch.len();
    let scale = T::one() / T::from_usize(n).expect("batch size fits scalar");
    let mut grads = batch.zeros_like();
    let mut per_instance = Vec::with_capacity(n);
    let mut items = Vec::new();
    let mut logits = Vec::new();
    for i in 0..n {
        cls_items(batch, labels, neg_labels, cfg, i, &mut items);
        per_instance.push(instance_loss(batch, &mut grads, i, &items, cfg, scale, &mut logits));
    }
    Ok(finish(per_instance, grads))
}
