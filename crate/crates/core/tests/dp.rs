mod common;

use common::{random_case, rel_err};
use dpformer::clipping::{clip_factors, naive_per_sample_oracle, ClipMode, ClipSpec, DEFAULT_ORACLE_BYTES};
use dpformer::optimizer::{add_noise, dp_step, private_gradient, Optimizer, OptimizerConfig, StepPrivacy};
use dpformer::privacy::{
    accountant_sigma, analytic_gaussian_sigma, epsilon_for, gaussian_mechanism_delta, PrivacySpec, SIGMA_GRID,
};
use dpformer::Tensor;

fn no_privacy() -> StepPrivacy {
    StepPrivacy {
        clip: ClipSpec::new(f64::INFINITY, ClipMode::Clip).unwrap(),
        noise_multiplier: 0.0,
        noise_seed: 0,
    }
}

#[test]
fn unclipped_noiseless_step_is_plain_sgd() {
    for seed in [1u64, 2, 3] {
        let case = random_case(seed + 700, true);
        let (mut a, mut b) = (case.model.clone(), case.model.clone());
        let mut oa = Optimizer::new(OptimizerConfig::sgd(0.05));
        let mut ob = Optimizer::new(OptimizerConfig::sgd(0.05));
        for _ in 0..5 {
            dp_step(&mut a, &mut oa, &case.batch, &no_privacy(), None, None).unwrap();
            let (_, grads) = b.loss_and_grads(&case.batch).unwrap();
            ob.apply(&mut b.params.tensors_mut(), &grads).unwrap();
        }
        for ((_, name, x), (_, _, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.data(), y.data(), "{name}");
        }
    }
}

#[test]
fn noise_has_calibrated_std() {
    let (sigma, c, b) = (1.3, 0.7, 16);
    let mut g = vec![Tensor::<f64>::zeros(&[1000, 1000])];
    add_noise(&mut g, sigma, c, b, 5, 0).unwrap();
    let n = g[0].numel() as f64;
    let mean = g[0].sum() / n;
    let sd = (g[0].sum_sq() / n - mean * mean).sqrt();
    let want = sigma * c / b as f64;
    assert!(rel_err(sd, want) < 0.01, "{sd} vs {want}");
}

#[test]
fn infinite_clip_with_noise_is_rejected() {
    let mut g = vec![Tensor::<f64>::zeros(&[2])];
    assert!(add_noise(&mut g, 1.0, f64::INFINITY, 1, 0, 0).is_err());
}

fn oracle_mean(seed: u64, spec: ClipSpec) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    let case = random_case(seed, true);
    let b = case.batch.batch as f64;
    let o = naive_per_sample_oracle(&case.model, &case.batch, DEFAULT_ORACLE_BYTES, None).unwrap();
    let f = clip_factors(o.norms.data(), &spec);
    let mut want: Vec<Tensor<f64>> = o.grads[0].iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (gi, fi) in o.grads.iter().zip(&f) {
        for (w, g) in want.iter_mut().zip(gi) {
            w.add_assign(&g.scale(fi / b)).unwrap();
        }
    }
    let privacy = StepPrivacy {
        clip: spec,
        noise_multiplier: 0.0,
        noise_seed: 0,
    };
    let (got, _, _) = private_gradient(&case.model, &case.batch, &privacy, 0, None, None).unwrap();
    (got, want)
}

#[test]
fn clipped_and_normalized_gradients_match_the_oracle() {
    for seed in 0..10 {
        for mode in [ClipMode::Clip, ClipMode::Normalize] {
            let (got, want) = oracle_mean(seed + 800, ClipSpec::new(0.05, mode).unwrap());
            for (g, w) in got.iter().zip(&want) {
                assert!(g.max_abs_diff(w) <= 1e-10 * (1.0 + w.norm()), "seed {seed} {mode}");
            }
        }
    }
}

#[test]
fn normalized_samples_each_contribute_norm_c() {
    let case = random_case(901, true);
    let spec = ClipSpec::new(0.3, ClipMode::Normalize).unwrap();
    let o = naive_per_sample_oracle(&case.model, &case.batch, DEFAULT_ORACLE_BYTES, None).unwrap();
    let f = clip_factors(o.norms.data(), &spec);
    for (gi, fi) in o.grads.iter().zip(&f) {
        let n: f64 = gi.iter().map(|t| t.scale(*fi).sum_sq()).sum::<f64>().sqrt();
        assert!((n - 0.3).abs() < 1e-9);
    }
}

#[test]
fn accountant_sigma_is_grid_minimal() {
    for &(eps, delta, q, t) in &[
        (1.0, 1e-5, 0.01, 1000u64),
        (10.0, 2e-3, 0.128, 210),
        (3.0, 1e-4, 0.5, 20),
        (0.5, 1e-6, 1.0, 1),
    ] {
        let s = accountant_sigma(eps, delta, q, t).unwrap();
        let k = (s / SIGMA_GRID).round() as u64;
        assert!((k as f64 * SIGMA_GRID - s).abs() < 1e-12);
        assert!(epsilon_for(q, s, t, delta).0 <= eps);
        // brute force over the grid below the answer, nearest first
        for j in (k.saturating_sub(2000)..k).rev() {
            let sj = j as f64 * SIGMA_GRID;
            assert!(epsilon_for(q, sj, t, delta).0 > eps, "sigma {sj} already meets {eps}");
        }
    }
}

#[test]
fn accountant_is_monotone() {
    let base = accountant_sigma(2.0, 1e-5, 0.05, 500).unwrap();
    assert!(accountant_sigma(4.0, 1e-5, 0.05, 500).unwrap() <= base);
    assert!(accountant_sigma(1.0, 1e-5, 0.05, 500).unwrap() >= base);
    assert!(accountant_sigma(2.0, 1e-5, 0.05, 1000).unwrap() >= base);
    assert!(accountant_sigma(2.0, 1e-5, 0.05, 100).unwrap() <= base);
    assert!(accountant_sigma(2.0, 1e-5, 0.1, 500).unwrap() >= base);
    assert!(accountant_sigma(2.0, 1e-5, 0.01, 500).unwrap() <= base);
}

#[test]
fn single_full_batch_step_matches_gaussian_requirement() {
    // q = 1, T = 1: the plain Gaussian RDP curve α / (2σ²), scanned directly
    let (eps, delta) = (10.0f64, 1e-5f64);
    let meets = |s: f64| (2..=64).any(|a| a as f64 / (2.0 * s * s) + (1.0 / delta).ln() / (a as f64 - 1.0) <= eps);
    let brute = (1..).map(|k| k as f64 * SIGMA_GRID).find(|&s| meets(s)).unwrap();
    let got = accountant_sigma(eps, delta, 1.0, 1).unwrap();
    assert!((got - brute).abs() < 1e-9, "{got} vs {brute}");

    for &(eps, delta) in &[(10.0, 1e-5), (1.0, 1e-5), (0.5, 1e-3), (3.0, 1e-6)] {
        let rdp = accountant_sigma(eps, delta, 1.0, 1).unwrap();
        let exact = analytic_gaussian_sigma(eps, delta);
        assert!((gaussian_mechanism_delta(eps, exact) - delta).abs() < 1e-3 * delta);
        assert!(rdp >= exact, "rdp {rdp} below exact {exact}");
        assert!(gaussian_mechanism_delta(eps, rdp) <= delta);
    }
}

#[test]
fn spent_budget_tracks_steps() {
    let clip = ClipSpec::new(1.0, ClipMode::Normalize).unwrap();
    let p = PrivacySpec::calibrate(5.0, 1e-5, 0.02, 400, clip).unwrap();
    assert!(p.epsilon_after(400) <= 5.0);
    assert!(p.epsilon_after(100) < p.epsilon_after(200));
    assert!(p.delta_warning(1000).is_none());
    assert!(p.delta_warning(100_000).is_some());
}
