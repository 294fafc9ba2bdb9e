//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! For integer order `α` the subsampled mechanism with rate `q` and noise
//! multiplier `σ` satisfies `(α, ε_α)`-RDP with
//! `ε_α = ln(Σ_k C(α,k) (1-q)^{α-k} q^k exp((k²-k) / (2σ²))) / (α-1)`.
//! `T` steps compose additively, and `(ε, δ)` follows from
//! `ε = min_α T ε_α + ln(1/δ) / (α-1)`.

use crate::clipping::ClipSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MIN_ORDER: u32 = 2;
pub const MAX_ORDER: u32 = 64;
/// Grid spacing of the noise-multiplier search.
pub const SIGMA_GRID: f64 = 1e-3;
pub const MAX_SIGMA: f64 = 1e6;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
}

/// RDP of one subsampled Gaussian step at integer order `alpha`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    let a = alpha as f64;
    if q >= 1.0 {
        return a / (2.0 * sigma * sigma);
    }
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = k as f64;
        let term = ln_binomial(alpha, k) + (a - kf) * l1q + kf * lq + (kf * kf - kf) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc / (a - 1.0)
}

/// `(ε, best order)` after `steps` compositions.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64) -> (f64, u32) {
    let mut best = (f64::INFINITY, MIN_ORDER);
    for alpha in MIN_ORDER..=MAX_ORDER {
        let eps = steps as f64 * rdp_subsampled_gaussian(q, sigma, alpha) + (1.0 / delta).ln() / (alpha as f64 - 1.0);
        if eps < best.0 {
            best = (eps, alpha);
        }
    }
    best
}

fn check_ranges(epsilon: f64, delta: f64, q: f64, steps: u64) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be positive")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta {delta} outside (0, 1)")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!("sampling rate {q} outside (0, 1]")));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be positive".into()));
    }
    Ok(())
}

/// Smallest multiple of [`SIGMA_GRID`] whose composed guarantee meets
/// `(epsilon, delta)`.
pub fn accountant_sigma(epsilon: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    check_ranges(epsilon, delta, q, steps)?;
    let ok = |i: u64| epsilon_for(q, i as f64 * SIGMA_GRID, steps, delta).0 <= epsilon;
    let mut hi = (MAX_SIGMA / SIGMA_GRID).round() as u64;
    if !ok(hi) {
        return Err(Error::InfeasibleBudget(format!(
            "epsilon {epsilon} with delta {delta}, q {q}, {steps} steps needs sigma above {MAX_SIGMA}"
        )));
    }
    let mut lo = 0u64; // sigma 0 never satisfies a finite budget
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi as f64 * SIGMA_GRID)
}

/// ε spent after `steps` steps at noise multiplier `sigma`.
pub fn epsilon_spent(q: f64, sigma: f64, steps: u64, delta: f64) -> f64 {
    if steps == 0 {
        return 0.0;
    }
    epsilon_for(q, sigma, steps, delta).0
}

/// Exact δ of the Gaussian mechanism with unit sensitivity at noise `sigma`.
pub fn gaussian_mechanism_delta(epsilon: f64, sigma: f64) -> f64 {
    let a = 1.0 / (2.0 * sigma);
    let b = epsilon * sigma;
    (a - b).norm_cdf() - epsilon.exp() * (-a - b).norm_cdf()
}

/// Smallest `sigma` (to relative precision 1e-9) for which the plain
/// Gaussian mechanism is `(epsilon, delta)`-DP, by bisection on the exact
/// privacy profile.
pub fn analytic_gaussian_sigma(epsilon: f64, delta: f64) -> f64 {
    let (mut lo, mut hi) = (1e-6, 1.0);
    while gaussian_mechanism_delta(epsilon, hi) > delta {
        hi *= 2.0;
    }
    while (hi - lo) > 1e-9 * hi {
        let mid = 0.5 * (lo + hi);
        if gaussian_mechanism_delta(epsilon, mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub sampling_rate: f64,
    pub steps: u64,
    pub noise_multiplier: f64,
    pub clip: ClipSpec,
}

impl PrivacySpec {
    /// Derives the noise multiplier from the budget.
    pub fn calibrate(epsilon: f64, delta: f64, sampling_rate: f64, steps: u64, clip: ClipSpec) -> Result<Self> {
        let noise_multiplier = accountant_sigma(epsilon, delta, sampling_rate, steps)?;
        Ok(Self {
            epsilon,
            delta,
            sampling_rate,
            steps,
            noise_multiplier,
            clip,
        })
    }

    /// A run with no noise; `epsilon` is infinite.
    pub fn non_private(clip: ClipSpec) -> Self {
        Self {
            epsilon: f64::INFINITY,
            delta: 0.0,
            sampling_rate: 1.0,
            steps: 0,
            noise_multiplier: 0.0,
            clip,
        }
    }

    pub fn epsilon_after(&self, steps: u64) -> f64 {
        if self.noise_multiplier == 0.0 {
            return f64::INFINITY;
        }
        epsilon_spent(self.sampling_rate, self.noise_multiplier, steps, self.delta)
    }

    /// Warning text when `delta` is not below one over the dataset size.
    pub fn delta_warning(&self, dataset_size: usize) -> Option<String> {
        (self.noise_multiplier > 0.0 && self.delta >= 1.0 / dataset_size as f64)
            .then(|| format!("delta {} is not below 1/{dataset_size}", self.delta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_is_plain_gaussian_rdp() {
        for alpha in [2, 5, 17] {
            let r = rdp_subsampled_gaussian(1.0, 1.7, alpha);
            assert!((r - alpha as f64 / (2.0 * 1.7 * 1.7)).abs() < 1e-12);
        }
    }

    #[test]
    fn binomial_sum_matches_closed_form_near_q_one() {
        // q -> 1 must approach the unsubsampled value
        let r = rdp_subsampled_gaussian(1.0 - 1e-12, 2.0, 8);
        assert!((r - 8.0 / 8.0).abs() < 1e-6);
    }

    #[test]
    fn alpha_two_closed_form() {
        // A_2 = 1 + q² (e^{1/σ²} - 1)
        let (q, s) = (0.1, 1.3);
        let want = (1.0 + q * q * (1.0f64 / (s * s)).exp_m1()).ln();
        assert!((rdp_subsampled_gaussian(q, s, 2) - want).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(accountant_sigma(-1.0, 1e-5, 0.1, 10).is_err());
        assert!(accountant_sigma(1.0, 1.5, 0.1, 10).is_err());
        assert!(matches!(
            accountant_sigma(1e-9, 1e-300, 1.0, 1_000_000_000),
            Err(Error::InfeasibleBudget(_))
        ));
    }
}
