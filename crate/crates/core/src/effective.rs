//! Effective noise per parameter group.
//!
//! A parameter group that only receives gradient from the samples that
//! activate it sees the full noise `σ_dp/B` per step but only a fraction `p`
//! of the signal, so its effective error is `σ_dp / (B p)`. Embedding rows are
//! indexed by token; every other parameter is activated by every sample.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::moments::GaussianStats;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stand-in for an infinite effective error (tokens that never occur).
pub const NEVER_SEEN_SIGMA: f64 = 1e12;

/// Per-token occurrence probability.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyTable {
    p: Vec<f64>,
}

impl FrequencyTable {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "probability {v} of token {i} outside [0, 1]"
            )));
        }
        Ok(Self { p })
    }

    /// Fraction of sequences containing each token at least once. Token 0 is
    /// padding and always gets probability 0.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [usize]>, vocab: usize) -> Result<Self> {
        let mut counts = vec![0usize; vocab];
        let mut seen = vec![usize::MAX; vocab];
        let mut n = 0usize;
        for (s, seq) in seqs.into_iter().enumerate() {
            n += 1;
            for &t in seq {
                if t >= vocab {
                    return Err(Error::IndexOutOfRange { index: t, size: vocab });
                }
                if t != 0 && seen[t] != s {
                    seen[t] = s;
                    counts[t] += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        Self::new(counts.iter().map(|&c| c as f64 / n as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }

    pub fn get(&self, token: usize) -> Option<f64> {
        self.p.get(token).copied()
    }

    /// Reads `token_id,probability` lines. Missing tokens get probability 0;
    /// blank lines and `#` comments are skipped.
    pub fn read_from<R: BufRead>(r: R, vocab: usize) -> Result<Self> {
        let mut p = vec![0.0; vocab];
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Parse(format!("line {}: expected `token_id,probability`, got {line:?}", n + 1));
            let (a, b) = line.split_once(',').ok_or_else(bad)?;
            let id: usize = a.trim().parse().map_err(|_| bad())?;
            let v: f64 = b.trim().parse().map_err(|_| bad())?;
            if id >= vocab {
                return Err(Error::IndexOutOfRange { index: id, size: vocab });
            }
            p[id] = v;
        }
        Self::new(p)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        for (i, v) in self.p.iter().enumerate() {
            writeln!(w, "{i},{v}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveErrorMap {
    pub sigma_eff_embedding: Vec<f64>,
    pub sigma_eff_weights: f64,
}

impl EffectiveErrorMap {
    pub fn embedding_variance(&self, token: usize) -> f64 {
        let s = self.sigma_eff_embedding[token];
        s * s
    }

    pub fn weight_variance(&self) -> f64 {
        self.sigma_eff_weights * self.sigma_eff_weights
    }

    /// Stats for an `[M, d]` embedding table: realized values as means and
    /// the per-token variance broadcast over each row.
    pub fn embedding_stats<S: Scalar>(&self, table: &Tensor<S>) -> Result<GaussianStats<S>> {
        if table.rank() != 2 || table.shape()[0] != self.sigma_eff_embedding.len() {
            return Err(crate::error::shape_err(
                "embedding_stats",
                format!("table {:?} vs {} tokens", table.shape(), self.sigma_eff_embedding.len()),
            ));
        }
        let d = table.shape()[1];
        let var = Tensor::from_fn(table.shape(), |i| S::cast(self.embedding_variance(i / d)));
        GaussianStats::new(table.clone(), var)
    }

    /// Stats for an always-activated parameter.
    pub fn weight_stats<S: Scalar>(&self, param: &Tensor<S>) -> Result<GaussianStats<S>> {
        let var = Tensor::full(param.shape(), S::cast(self.weight_variance()));
        GaussianStats::new(param.clone(), var)
    }
}

pub fn setup_effective_error(sigma_dp: f64, batch: usize, freq: &FrequencyTable) -> Result<EffectiveErrorMap> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if !(sigma_dp >= 0.0) || !sigma_dp.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise multiplier {sigma_dp} must be finite and nonnegative"
        )));
    }
    let b = batch as f64;
    let sigma_eff_embedding = freq
        .probabilities()
        .iter()
        .map(|&p| if p > 0.0 { sigma_dp / (b * p) } else { NEVER_SEEN_SIGMA })
        .collect();
    Ok(EffectiveErrorMap {
        sigma_eff_embedding,
        sigma_eff_weights: sigma_dp / b,
    })
}

/// Simulates `batches` batches of `batch` sequences in which token `i`
/// occurs independently with probability `p_i`, and returns the mean number
/// of activating samples per batch divided by `batch`.
pub fn simulate_effective_batch(freq: &FrequencyTable, batch: usize, batches: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = vec![0u64; freq.len()];
    for _ in 0..batches {
        for _ in 0..batch {
            for (h, &p) in hits.iter_mut().zip(freq.probabilities()) {
                if rng.random::<f64>() < p {
                    *h += 1;
                }
            }
        }
    }
    let denom = (batches * batch) as f64;
    hits.iter().map(|&h| h as f64 / denom).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn claim_examples() {
        let f = FrequencyTable::new(vec![1.0, 0.01, 0.0]).unwrap();
        let m = setup_effective_error(1.0, 100, &f).unwrap();
        assert_eq!(m.sigma_eff_embedding[0], m.sigma_eff_weights);
        assert!((m.sigma_eff_embedding[1] - 1.0).abs() < 1e-12);
        assert_eq!(m.sigma_eff_embedding[2], NEVER_SEEN_SIGMA);
    }

    #[test]
    fn rejects_bad_probabilities() {
        assert!(FrequencyTable::new(vec![0.5, 1.5]).is_err());
        assert!(FrequencyTable::new(vec![-0.1]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let f = FrequencyTable::new(vec![0.0, 0.25, 0.5]).unwrap();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        let g = FrequencyTable::read_from(&buf[..], 3).unwrap();
        assert_eq!(f, g);
        assert!(FrequencyTable::read_from(&b"1;0.5\n"[..], 3).is_err());
    }

    #[test]
    fn per_sequence_counts() {
        let seqs: Vec<Vec<usize>> = vec![vec![0, 1, 1, 2], vec![2, 3], vec![1]];
        let f = FrequencyTable::from_sequences(seqs.iter().map(|s| s.as_slice()), 4).unwrap();
        assert_eq!(f.probabilities(), &[0.0, 2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0]);
    }
}
