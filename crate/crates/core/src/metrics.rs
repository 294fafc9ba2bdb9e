//! Full-ranking NDCG@k and HIT@k with a single relevant item.

use crate::data::SequenceDataset;
use crate::effective::EffectiveErrorMap;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank == 0 || rank > k {
        0.0
    } else {
        1.0 / ((rank + 1) as f64).log2()
    }
}

pub fn hit_at_k(rank: usize, k: usize) -> u8 {
    u8::from(rank >= 1 && rank <= k)
}

/// 1-based rank of `target` among `candidates`; ties go to the lower id.
pub fn rank_of<S: Scalar>(scores: &[S], target: usize, candidates: std::ops::RangeInclusive<usize>) -> usize {
    let st = scores[target];
    1 + candidates
        .filter(|&j| j != target && (scores[j] > st || (scores[j] == st && j < target)))
        .count()
}

/// Expected NDCG@k of a uniformly random ranking of `num_candidates` items.
pub fn random_ndcg_at_k(num_candidates: usize, k: usize) -> f64 {
    let m = num_candidates as f64;
    (1..=k.min(num_candidates))
        .map(|r| (1.0 / m) / ((r + 1) as f64).log2())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub ndcg: f64,
    pub hit: f64,
    /// Mean test cross-entropy over the full vocabulary.
    pub loss: f64,
}

/// Ranks every item for each user's held-out last item.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    data: &SequenceDataset,
    k: usize,
    batch_size: usize,
    reattention: Option<&EffectiveErrorMap>,
) -> Result<EvalResult> {
    if data.vocab_size() != model.config.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "dataset vocabulary {} vs model {}",
            data.vocab_size(),
            model.config.vocab_size
        )));
    }
    let (mut ndcg, mut hit, mut loss, mut n) = (0.0, 0.0, 0.0, 0usize);
    for batch in data.test_batches(batch_size, model.config.max_len)? {
        let scores = model.scores(&batch, reattention)?;
        let m = scores.last_dim();
        for (i, &target) in batch.targets.iter().enumerate() {
            let row = scores.row(i);
            let r = rank_of(row, target, 1..=data.num_items);
            ndcg += ndcg_at_k(r, k);
            hit += f64::from(hit_at_k(r, k));
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
            let lse = mx + row.iter().map(|v| (v.as_f64() - mx).exp()).sum::<f64>().ln();
            loss += lse - row[target].as_f64();
            n += 1;
        }
        debug_assert_eq!(m, data.vocab_size());
    }
    let nf = n as f64;
    Ok(EvalResult {
        ndcg: ndcg / nf,
        hit: hit / nf,
        loss: loss / nf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_cases() {
        assert_eq!((ndcg_at_k(1, 10), hit_at_k(1, 10)), (1.0, 1));
        assert!((ndcg_at_k(3, 10) - 0.5).abs() < 1e-15);
        assert_eq!((ndcg_at_k(11, 10), hit_at_k(11, 10)), (0.0, 0));
    }

    #[test]
    fn ties_break_by_id() {
        let s = [0.0, 1.0, 1.0, 1.0, 0.5];
        assert_eq!(rank_of(&s, 1, 1..=4), 1);
        assert_eq!(rank_of(&s, 3, 1..=4), 3);
        assert_eq!(rank_of(&s, 4, 1..=4), 4);
    }

    #[test]
    fn random_baseline_is_average_over_ranks() {
        let m = 37;
        let avg: f64 = (1..=m).map(|r| ndcg_at_k(r, 10)).sum::<f64>() / m as f64;
        assert!((random_ndcg_at_k(m, 10) - avg).abs() < 1e-15);
    }
}
