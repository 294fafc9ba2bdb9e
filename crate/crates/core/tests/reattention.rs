mod common;

use common::random_case;
use dpformer::effective::{setup_effective_error, FrequencyTable};
use dpformer::reattention::{
    corrected_scores, distraction_experiment, divide_and_renormalize, gumbel_softmax_identity, logsumexp,
    masked_softmax, reattention_forward, DistractionConfig, EULER_MASCHERONI,
};
use dpformer::tape::AttentionMask;
use dpformer::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn zero_variance_is_bit_identical_in_the_model() {
    for seed in 0..20 {
        let case = random_case(seed + 300, true);
        let m = case.model.config.vocab_size;
        let freq = FrequencyTable::new((0..m).map(|i| if i == 0 { 0.0 } else { 0.5 }).collect()).unwrap();
        let map = setup_effective_error(0.0, case.batch.batch, &freq).unwrap();
        let plain = case.model.scores(&case.batch, None).unwrap();
        let corrected = case.model.scores(&case.batch, Some(&map)).unwrap();
        assert_eq!(plain.data(), corrected.data(), "seed {seed}");
    }
}

#[test]
fn zero_variance_is_bit_identical_standalone() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [2, 2, 5, 3];
    let (q, k, v) = (
        rand_tensor(&mut rng, &shape),
        rand_tensor(&mut rng, &shape),
        rand_tensor(&mut rng, &shape),
    );
    let mask = AttentionMask::causal(2, 5, &[false; 10]);
    let (out, tr) = reattention_forward(&q, &k, &v, &Tensor::zeros(&[2, 2, 5]), Some(&mask), 0.7).unwrap();
    assert_eq!(tr.raw_scores.data(), tr.corrected_scores.data());
    let (out2, _) = reattention_forward(&q, &k, &v, &Tensor::zeros(&[2, 2, 5]), Some(&mask), 0.7).unwrap();
    assert_eq!(out.data(), out2.data());
}

#[test]
fn hand_example() {
    // logits (1, 1, 1), variances (0, 0, 1), query energy 2: divisors (1, 1, e)
    let got = corrected_scores(&[1.0, 1.0, 1.0], &[0.0, 0.0, 1.0], 2.0).unwrap();
    let e = std::f64::consts::E;
    let z = 2.0 + 1.0 / e;
    let want = [1.0 / z, 1.0 / z, 1.0 / (e * z)];
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-12);
    }
}

#[test]
fn distraction_is_monotone_and_correction_helps() {
    let rows = distraction_experiment(&DistractionConfig::default()).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].mc_score >= w[0].mc_score, "{:?}", rows);
    }
    let last = rows.last().unwrap();
    assert_eq!(last.variance, 1.0);
    assert!((last.corrected_score - last.noiseless_score).abs() < (last.mc_score - last.noiseless_score).abs());
    assert!(rows[0].inflation_ratio() < 1.0 + 1e-9);
}

#[test]
fn gumbel_max_recovers_logsumexp() {
    let c = gumbel_softmax_identity(&[0.5, -1.0, 2.0], 1_000_000, 4, EULER_MASCHERONI).unwrap();
    assert!((c.estimate - c.logsumexp).abs() < 0.01);
    assert!((c.logsumexp - logsumexp(&[0.5, -1.0, 2.0])).abs() < 1e-15);
}

proptest! {
    #[test]
    fn uniform_variance_leaves_scores_unchanged(
        logits in prop::collection::vec(-5.0f64..5.0, 1..12),
        var in 0.0f64..3.0,
        energy in 0.0f64..4.0,
    ) {
        let raw = masked_softmax(&logits, |_| true);
        let vars = vec![var; logits.len()];
        let a = corrected_scores(&logits, &vars, energy).unwrap();
        let b = divide_and_renormalize(&raw, &vars, energy).unwrap();
        for ((r, x), y) in raw.iter().zip(&a).zip(&b) {
            prop_assert!((r - x).abs() <= 1e-12);
            prop_assert!((r - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn both_correction_routes_agree(
        rows in prop::collection::vec((-4.0f64..4.0, 0.0f64..2.0), 1..10),
        energy in 0.0f64..3.0,
    ) {
        let (logits, vars): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        let a = corrected_scores(&logits, &vars, energy).unwrap();
        let b = divide_and_renormalize(&masked_softmax(&logits, |_| true), &vars, energy).unwrap();
        let total: f64 = a.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn higher_variance_never_gains_attention(
        logits in prop::collection::vec(-3.0f64..3.0, 2..8),
        v in 0.01f64..2.0,
        energy in 0.01f64..3.0,
    ) {
        let mut vars = vec![0.0; logits.len()];
        vars[0] = v;
        let raw = masked_softmax(&logits, |_| true);
        let c = corrected_scores(&logits, &vars, energy).unwrap();
        prop_assert!(c[0] <= raw[0]);
    }
}
