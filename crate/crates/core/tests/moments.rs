use dpformer::analysis::moments_table;
use dpformer::model::Activation;
use dpformer::moments::{
    max_gaussian_moments, propagate_dropout, propagate_linear, propagate_product, propagate_relu, relu_moments,
    GaussianStats,
};
use dpformer::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const DRAWS: usize = 1_000_000;

fn normal(rng: &mut ChaCha8Rng, mean: f64, var: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + var.sqrt() * z
}

fn sample_moments(mut f: impl FnMut() -> f64) -> (f64, f64) {
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..DRAWS {
        let y = f();
        s1 += y;
        s2 += y * y;
    }
    let n = DRAWS as f64;
    (s1 / n, s2 / n - (s1 / n) * (s1 / n))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-12)
}

#[test]
fn relu_table_values() {
    // output variances for input standard deviations 0.01, 0.1 and 1
    let want = [3.40e-5, 0.0034, 0.3408];
    for (&v, &w) in [1e-4, 1e-2, 1.0].iter().zip(&want) {
        let x = GaussianStats::new(Tensor::<f64>::zeros(&[1]), Tensor::full(&[1], v)).unwrap();
        let got = propagate_relu(&x).unwrap().var.data()[0];
        assert!(close(got, w, 0.01), "{v}: {got} vs {w}");
    }
}

#[test]
fn relu_table_matches_sampling() {
    for r in moments_table(DRAWS, 11).unwrap() {
        if r.activation == Activation::Relu {
            assert!(close(r.sampled, r.analytic, 0.02), "{r:?}");
        }
    }
}

#[test]
fn relu_moments_match_sampling_off_center() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(c, d) in &[(0.7, 0.3), (-0.4, 1.5), (2.0, 0.1)] {
        let (m1, m2) = relu_moments(c, d);
        let (sm, sv) = sample_moments(|| normal(&mut rng, c, d).max(0.0));
        assert!(close(m1, sm, 0.02), "mean {m1} vs {sm}");
        assert!(close(m2 - m1 * m1, sv, 0.02), "var {} vs {sv}", m2 - m1 * m1);
    }
}

#[test]
fn relu_moments_match_sampling_at_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let (c, d) = (rng.random_range(-1.0..1.0), rng.random_range(0.1..2.0));
        let (m1, m2) = relu_moments(c, d);
        let (sm, sv) = sample_moments(|| normal(&mut rng, c, d).max(0.0));
        assert!(close(m1, sm, 0.02), "({c}, {d}) mean {m1} vs {sm}");
        assert!(close(m2 - m1 * m1, sv, 0.02), "({c}, {d}) var {} vs {sv}", m2 - m1 * m1);
    }
}

#[test]
fn linear_moments_match_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (p, q) = (4, 3);
    let xm: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xv: Vec<f64> = (0..p).map(|_| rng.random_range(0.05..0.5)).collect();
    let wm: Vec<f64> = (0..p * q).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wv: Vec<f64> = (0..p * q).map(|_| rng.random_range(0.0..0.2)).collect();
    let x = GaussianStats::new(
        Tensor::new(vec![1, p], xm.clone()).unwrap(),
        Tensor::new(vec![1, p], xv.clone()).unwrap(),
    )
    .unwrap();
    let w = GaussianStats::new(
        Tensor::new(vec![p, q], wm.clone()).unwrap(),
        Tensor::new(vec![p, q], wv.clone()).unwrap(),
    )
    .unwrap();
    let out = propagate_linear(&x, &w, None).unwrap();
    for j in 0..q {
        let (sm, sv) = sample_moments(|| {
            (0..p)
                .map(|k| normal(&mut rng, xm[k], xv[k]) * normal(&mut rng, wm[k * q + j], wv[k * q + j]))
                .sum()
        });
        assert!((out.mean.data()[j] - sm).abs() < 0.02 * sv.sqrt());
        assert!(close(out.var.data()[j], sv, 0.02), "{} vs {sv}", out.var.data()[j]);
    }
}

#[test]
fn product_and_max_moments_match_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = GaussianStats::new(
        Tensor::from_f64(&[1], &[0.8]).unwrap(),
        Tensor::from_f64(&[1], &[0.3]).unwrap(),
    )
    .unwrap();
    let b = GaussianStats::new(
        Tensor::from_f64(&[1], &[-1.1]).unwrap(),
        Tensor::from_f64(&[1], &[0.6]).unwrap(),
    )
    .unwrap();
    let p = propagate_product(&a, &b).unwrap();
    let (_, sv) = sample_moments(|| normal(&mut rng, 0.8, 0.3) * normal(&mut rng, -1.1, 0.6));
    assert!(close(p.var.data()[0], sv, 0.02));

    let (m1, m2) = max_gaussian_moments(0.2, 0.5, -0.1, 1.3).unwrap();
    let (sm, sv) = sample_moments(|| normal(&mut rng, 0.2, 0.5).max(normal(&mut rng, -0.1, 1.3)));
    assert!(close(m1, sm, 0.02));
    assert!(close(m2 - m1 * m1, sv, 0.02));
}

#[test]
fn inverted_dropout_moments_match_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = GaussianStats::new(
        Tensor::from_f64(&[1], &[0.9]).unwrap(),
        Tensor::from_f64(&[1], &[0.2]).unwrap(),
    )
    .unwrap();
    let rate = 0.3;
    let out = propagate_dropout(&x, rate).unwrap();
    let (sm, sv) = sample_moments(|| {
        let keep = rng.random::<f64>() >= rate;
        if keep {
            normal(&mut rng, 0.9, 0.2) / (1.0 - rate)
        } else {
            0.0
        }
    });
    assert!(close(out.mean.data()[0], sm, 0.02));
    assert!(close(out.var.data()[0], sv, 0.02), "{} vs {sv}", out.var.data()[0]);
}

proptest! {
    #[test]
    fn relu_is_positively_homogeneous(c in -5.0f64..5.0, d in 0.0f64..4.0, k in 0.01f64..10.0) {
        let (m1, m2) = relu_moments(c, d);
        let (n1, n2) = relu_moments(k * c, k * k * d);
        prop_assert!((n1 - k * m1).abs() <= 1e-9 * (1.0 + (k * m1).abs()));
        prop_assert!((n2 - k * k * m2).abs() <= 1e-9 * (1.0 + (k * k * m2).abs()));
    }

    #[test]
    fn second_moment_dominates_squared_mean(c in -8.0f64..8.0, d in 0.0f64..9.0) {
        let (m1, m2) = relu_moments(c, d);
        prop_assert!(m2 >= m1 * m1 - 1e-12 * (1.0 + m2.abs()));
        prop_assert!(m1 >= 0.0);
    }

    #[test]
    fn max_second_moment_dominates(mu1 in -4.0f64..4.0, v1 in 0.0f64..4.0, mu2 in -4.0f64..4.0, v2 in 0.0f64..4.0) {
        let (m1, m2) = max_gaussian_moments(mu1, v1, mu2, v2).unwrap();
        prop_assert!(m2 >= m1 * m1 - 1e-9 * (1.0 + m2.abs()));
        prop_assert!(m1 >= mu1.max(mu2) - 1e-12);
    }
}
