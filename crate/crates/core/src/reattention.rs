//! Variance-aware attention correction and the Monte-Carlo harnesses that
//! exhibit the bias it removes.
//!
//! A key with isotropic variance `σ²` makes the logit `⟨q, K⟩` Gaussian with
//! variance `C σ²`, `C = ⟨q, q⟩`, which inflates the expected exponentiated
//! score by `exp(C σ² / 2)`. The correction divides each score by that factor
//! and renormalizes the row. It is evaluated in the log domain as a shift of
//! the logits by `-C σ² / 2` before a single softmax.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tape::AttentionMask;
use crate::tensor::{dot, Tensor};

/// Mean of the standard Gumbel distribution (Euler–Mascheroni constant).
pub const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;

/// Raw and corrected attention for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace<S> {
    /// `[B, h, L, L]`
    pub raw_scores: Tensor<S>,
    /// `[B, h, L, L]`
    pub corrected_scores: Tensor<S>,
    /// Scalar key variance per key, `[B, h, L]`.
    pub key_variance: Tensor<S>,
    /// Query energy `C` per query, `[B, h, L]`.
    pub query_energy: Tensor<S>,
}

fn check_var<S: Scalar>(var: &[S]) -> Result<()> {
    if var.iter().any(|v| *v < S::zero() || v.is_nan()) {
        return Err(Error::InvalidArgument("negative key variance".into()));
    }
    Ok(())
}

/// Softmax over the visible entries of `logits`; hidden entries get zero.
pub fn masked_softmax<S: Scalar>(logits: &[S], visible: impl Fn(usize) -> bool) -> Vec<S> {
    let mx = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| visible(*j))
        .fold(S::neg_infinity(), |m, (_, &v)| m.max(v));
    let mut out: Vec<S> = logits
        .iter()
        .enumerate()
        .map(|(j, &v)| if visible(j) { (v - mx).exp() } else { S::zero() })
        .collect();
    let z = out.iter().fold(S::zero(), |a, &v| a + v);
    for o in &mut out {
        *o /= z;
    }
    out
}

/// Corrected attention row, log-domain route:
/// `softmax(logit_j - energy * var_j / 2)`.
pub fn corrected_scores<S: Scalar>(logits: &[S], key_var: &[S], energy: S) -> Result<Vec<S>> {
    if logits.len() != key_var.len() {
        return Err(shape_err(
            "corrected_scores",
            format!("{} vs {}", logits.len(), key_var.len()),
        ));
    }
    check_var(key_var)?;
    let half = S::cast(0.5);
    let shifted: Vec<S> = logits
        .iter()
        .zip(key_var)
        .map(|(&x, &v)| x - energy * v * half)
        .collect();
    Ok(masked_softmax(&shifted, |_| true))
}

/// Corrected attention row, direct route: divide softmax scores by
/// `exp(energy * var_j / 2)` and renormalize.
pub fn divide_and_renormalize<S: Scalar>(scores: &[S], key_var: &[S], energy: S) -> Result<Vec<S>> {
    if scores.len() != key_var.len() {
        return Err(shape_err(
            "divide_and_renormalize",
            format!("{} vs {}", scores.len(), key_var.len()),
        ));
    }
    check_var(key_var)?;
    let half = S::cast(0.5);
    let mut out: Vec<S> = scores
        .iter()
        .zip(key_var)
        .map(|(&s, &v)| s / (energy * v * half).exp())
        .collect();
    let z = out.iter().fold(S::zero(), |a, &v| a + v);
    for o in &mut out {
        *o /= z;
    }
    Ok(out)
}

/// Standalone single-layer attention with the variance correction.
///
/// `q, k, v: [B, h, L, dh]`, `key_var: [B, h, L]`. Logits are
/// `scale * ⟨q_i, k_j⟩`, so the effective query energy is
/// `scale² * ⟨q_i, q_i⟩`. Returns the attention outputs `[B, h, L, dh]`
/// (mixed with the corrected scores) and the trace.
pub fn reattention_forward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    key_var: &Tensor<S>,
    mask: Option<&AttentionMask>,
    scale: S,
) -> Result<(Tensor<S>, AttentionTrace<S>)> {
    if q.rank() != 4 || q.shape() != k.shape() || q.shape() != v.shape() || key_var.shape() != &q.shape()[..3] {
        return Err(shape_err(
            "reattention_forward",
            format!(
                "q {:?} k {:?} v {:?} var {:?}",
                q.shape(),
                k.shape(),
                v.shape(),
                key_var.shape()
            ),
        ));
    }
    check_var(key_var.data())?;
    let (b, h, l, dh) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let half = S::cast(0.5);
    let mut raw = vec![S::zero(); b * h * l * l];
    let mut corrected = vec![S::zero(); b * h * l * l];
    let mut energy = vec![S::zero(); b * h * l];
    let mut out = vec![S::zero(); b * h * l * dh];
    for bi in 0..b {
        for hi in 0..h {
            let g = bi * h + hi;
            let vars = &key_var.data()[g * l..(g + 1) * l];
            for i in 0..l {
                let qi = &q.data()[(g * l + i) * dh..(g * l + i + 1) * dh];
                let c = scale * scale * dot(qi, qi);
                energy[g * l + i] = c;
                let logits: Vec<S> = (0..l)
                    .map(|j| scale * dot(qi, &k.data()[(g * l + j) * dh..(g * l + j + 1) * dh]))
                    .collect();
                let visible = |j: usize| mask.is_none_or(|m| m.allowed[(bi * l + i) * l + j]);
                let r = masked_softmax(&logits, visible);
                let shifted: Vec<S> = logits.iter().zip(vars).map(|(&x, &s2)| x - c * s2 * half).collect();
                let cr = masked_softmax(&shifted, visible);
                let row = (g * l + i) * l;
                raw[row..row + l].copy_from_slice(&r);
                corrected[row..row + l].copy_from_slice(&cr);
                let o = &mut out[(g * l + i) * dh..(g * l + i + 1) * dh];
                for (j, &w) in cr.iter().enumerate() {
                    let vj = &v.data()[(g * l + j) * dh..(g * l + j + 1) * dh];
                    for (ov, &vv) in o.iter_mut().zip(vj) {
                        *ov += w * vv;
                    }
                }
            }
        }
    }
    let trace = AttentionTrace {
        raw_scores: Tensor::from_parts(vec![b, h, l, l], raw),
        corrected_scores: Tensor::from_parts(vec![b, h, l, l], corrected),
        key_variance: key_var.clone(),
        query_energy: Tensor::from_parts(vec![b, h, l], energy),
    };
    Ok((Tensor::from_parts(vec![b, h, l, dh], out), trace))
}

pub fn logsumexp(x: &[f64]) -> f64 {
    let mx = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    mx + x.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug)]
pub struct GumbelCheck {
    pub softmax: Vec<f64>,
    pub logsumexp: f64,
    /// Sample mean of `max_j (x_j + γ_j)`.
    pub mean_max: f64,
    /// `mean_max - zeta`, the Monte-Carlo estimate of `logsumexp`.
    pub estimate: f64,
}

/// Checks `E[max_j (x_j + γ_j)] = logsumexp(x) + zeta` with i.i.d. standard
/// Gumbel `γ_j`, one draw per logit per sample.
pub fn gumbel_softmax_identity(logits: &[f64], draws: usize, seed: u64, zeta: f64) -> Result<GumbelCheck> {
    if logits.is_empty() || draws == 0 {
        return Err(Error::InvalidArgument("need logits and at least one draw".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..draws {
        let mut best = f64::NEG_INFINITY;
        for &x in logits {
            let u: f64 = rng.random::<f64>();
            // u in [0, 1); map to (0, 1)
            let u = u.max(f64::MIN_POSITIVE);
            let g = -(-u.ln()).ln();
            best = best.max(x + g);
        }
        acc += best;
    }
    let mean_max = acc / draws as f64;
    Ok(GumbelCheck {
        softmax: masked_softmax(logits, |_| true),
        logsumexp: logsumexp(logits),
        mean_max,
        estimate: mean_max - zeta,
    })
}

#[derive(Clone, Debug)]
pub struct DistractionConfig {
    /// Noiseless keys, one row of width `dim` per token.
    pub keys: Vec<Vec<f64>>,
    pub query: Vec<f64>,
    /// Index of the token whose key receives noise.
    pub target: usize,
    pub variances: Vec<f64>,
    pub draws: usize,
    pub seed: u64,
}

impl Default for DistractionConfig {
    fn default() -> Self {
        // Unit query; the target key sits well below the others.
        let query = vec![1.0, 0.0, 0.0, 0.0];
        let keys = vec![
            vec![1.5, 0.3, -0.2, 0.1],
            vec![1.0, -0.4, 0.5, 0.0],
            vec![0.5, 0.2, 0.1, -0.3],
            vec![-1.0, 0.6, -0.1, 0.2],
        ];
        Self {
            keys,
            query,
            target: 3,
            variances: vec![0.0, 0.25, 0.5, 1.0],
            draws: 100_000,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistractionRow {
    pub variance: f64,
    /// Monte-Carlo mean attention of the target under noisy keys.
    pub mc_score: f64,
    pub noiseless_score: f64,
    /// Monte-Carlo mean of the corrected attention of the target.
    pub corrected_score: f64,
}

impl DistractionRow {
    pub fn inflation_ratio(&self) -> f64 {
        self.mc_score / self.noiseless_score
    }
}

/// Sweeps the target key's isotropic noise variance and reports the mean
/// attention it receives with and without correction. The same standard
/// normal draws are reused across the grid.
pub fn distraction_experiment(cfg: &DistractionConfig) -> Result<Vec<DistractionRow>> {
    let l = cfg.keys.len();
    let dim = cfg.query.len();
    if cfg.target >= l || cfg.keys.iter().any(|k| k.len() != dim) || cfg.draws == 0 {
        return Err(Error::InvalidArgument("malformed distraction config".into()));
    }
    if cfg.variances.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("negative variance".into()));
    }
    let energy = dot(&cfg.query, &cfg.query);
    let base: Vec<f64> = cfg.keys.iter().map(|k| dot(&cfg.query, k)).collect();
    let noiseless = masked_softmax(&base, |_| true)[cfg.target];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise: Vec<f64> = (0..cfg.draws * dim).map(|_| rng.sample(StandardNormal)).collect();

    let mut rows = Vec::with_capacity(cfg.variances.len());
    for &var in &cfg.variances {
        let sd = var.sqrt();
        let mut var_vec = vec![0.0; l];
        var_vec[cfg.target] = var;
        let (mut mc, mut corr) = (0.0, 0.0);
        let mut logits = base.clone();
        for d in 0..cfg.draws {
            let eps = &noise[d * dim..(d + 1) * dim];
            let noisy_key: Vec<f64> = cfg.keys[cfg.target]
                .iter()
                .zip(eps)
                .map(|(&k, &e)| k + sd * e)
                .collect();
            logits[cfg.target] = dot(&cfg.query, &noisy_key);
            mc += masked_softmax(&logits, |_| true)[cfg.target];
            corr += corrected_scores(&logits, &var_vec, energy)?[cfg.target];
        }
        rows.push(DistractionRow {
            variance: var,
            mc_score: mc / cfg.draws as f64,
            noiseless_score: noiseless,
            corrected_score: corr / cfg.draws as f64,
        });
    }
    Ok(rows)
}

pub fn write_distraction_csv<W: Write>(w: &mut W, rows: &[DistractionRow]) -> Result<()> {
    writeln!(w, "variance,mc_score,noiseless_score,corrected_score")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.variance, r.mc_score, r.noiseless_score, r.corrected_score
        )?;
    }
    Ok(())
}
