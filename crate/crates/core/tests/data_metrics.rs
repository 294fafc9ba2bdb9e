use std::collections::BTreeMap;

use dpformer::data::{generate_zipf, preprocess, Interaction, InteractionLog, SequenceDataset, ZipfSampler};
use dpformer::effective::{setup_effective_error, simulate_effective_batch, FrequencyTable, NEVER_SEEN_SIGMA};
use dpformer::metrics::{hit_at_k, ndcg_at_k, random_ndcg_at_k, rank_of};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn log_of(edges: &[(u64, u64)]) -> InteractionLog {
    InteractionLog {
        records: edges
            .iter()
            .enumerate()
            .map(|(t, &(user, item))| Interaction {
                user,
                item,
                timestamp: t as i64,
            })
            .collect(),
    }
}

/// Straightforward reference k-core filter on edge lists.
fn reference_core(edges: &[(u64, u64)], k: usize) -> Vec<(u64, u64)> {
    let mut cur = edges.to_vec();
    loop {
        let mut du: BTreeMap<u64, usize> = BTreeMap::new();
        let mut di: BTreeMap<u64, usize> = BTreeMap::new();
        for &(u, i) in &cur {
            *du.entry(u).or_default() += 1;
            *di.entry(i).or_default() += 1;
        }
        let next: Vec<_> = cur.iter().copied().filter(|(u, i)| du[u] >= k && di[i] >= k).collect();
        if next.len() == cur.len() {
            return next;
        }
        cur = next;
    }
}

#[test]
fn cascade_reaches_the_reference_fixpoint() {
    // k = 3: item 12 has two records and drops, which leaves user 4 with one
    // record, so user 4 goes too and item 10 is left with exactly three
    let mut edges = Vec::new();
    for u in 1..=3 {
        edges.push((u, 10));
        edges.push((u, 11));
        edges.push((u, 11));
    }
    edges.extend([(4, 12), (4, 12), (4, 10)]);
    edges.push((5, 13));
    let want = reference_core(&edges, 3);
    let want_users: std::collections::BTreeSet<u64> = want.iter().map(|e| e.0).collect();
    assert_eq!(want_users, [1, 2, 3].into());
    let got = preprocess(&log_of(&edges), 3).unwrap();
    assert_eq!(got.num_users(), 3);
    assert_eq!(got.num_items, 2);
    assert_eq!(got.sequences.iter().map(Vec::len).sum::<usize>(), want.len());
}

#[test]
fn short_user_is_removed_and_full_core_is_unchanged() {
    let mut edges = Vec::new();
    for u in 0..6u64 {
        for i in 0..5u64 {
            edges.push((u, i));
        }
    }
    let full = preprocess(&log_of(&edges), 5).unwrap();
    assert_eq!((full.num_users(), full.num_items), (6, 5));
    edges.extend([(9, 0), (9, 1), (9, 2), (9, 3)]);
    let trimmed = preprocess(&log_of(&edges), 5).unwrap();
    assert_eq!(trimmed.num_users(), 6);
    assert!(preprocess(&log_of(&[(1, 1)]), 5).is_err());
}

#[test]
fn chronological_order_and_leave_last_out() {
    let log = InteractionLog {
        records: vec![
            Interaction {
                user: 7,
                item: 30,
                timestamp: 5,
            },
            Interaction {
                user: 7,
                item: 10,
                timestamp: 1,
            },
            Interaction {
                user: 7,
                item: 20,
                timestamp: 3,
            },
        ],
    };
    let d = preprocess(&log, 1).unwrap();
    assert_eq!(d.sequences[0], vec![1, 2, 3]);
    assert_eq!(d.train_prefix(0), &[1, 2]);
    assert_eq!(d.test_item(0), 3);
}

#[test]
fn zipf_exponent_zero_is_flat() {
    let z = ZipfSampler::new(20, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts = [0usize; 21];
    for _ in 0..100_000 {
        counts[z.sample(&mut rng)] += 1;
    }
    let (mx, mn) = (counts[1..].iter().max().unwrap(), counts[1..].iter().min().unwrap());
    assert!((*mx as f64 / *mn as f64) < 1.5);
}

#[test]
fn zipf_rank_frequency_slope() {
    let d = generate_zipf(20_000, 1000, (40, 60), 1.2, 3).unwrap();
    let mut counts = vec![0usize; 1001];
    for s in &d.sequences {
        for &t in s {
            counts[t] += 1;
        }
    }
    let mut c: Vec<f64> = counts[1..].iter().map(|&n| n as f64).collect();
    c.sort_by(|a, b| b.total_cmp(a));
    let pts: Vec<(f64, f64)> = c[..100]
        .iter()
        .enumerate()
        .map(|(r, &n)| (((r + 1) as f64).ln(), n.ln()))
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let slope =
        pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((slope + 1.2).abs() <= 0.1, "slope {slope}");
}

#[test]
fn generation_is_deterministic() {
    let a = generate_zipf(50, 30, (5, 9), 1.0, 11).unwrap();
    let b = generate_zipf(50, 30, (5, 9), 1.0, 11).unwrap();
    assert_eq!(a.sequences, b.sequences);
    assert_ne!(a.sequences, generate_zipf(50, 30, (5, 9), 1.0, 12).unwrap().sequences);
}

#[test]
fn log_and_cache_round_trip() {
    let d = generate_zipf(40, 25, (6, 12), 1.0, 4).unwrap();
    let mut buf = Vec::new();
    d.to_log().write_tsv(&mut buf).unwrap();
    let back = preprocess(&InteractionLog::read_tsv(&buf[..]).unwrap(), 1).unwrap();
    assert_eq!(back.num_users(), d.num_users());
    let dir = std::env::temp_dir().join(format!("dpformer-cache-{}", std::process::id()));
    d.write_cache(&dir).unwrap();
    let c = SequenceDataset::read_cache(&dir).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
    assert_eq!(c.sequences, d.sequences);
    assert_eq!(c.frequency, d.frequency);
}

#[test]
fn frequency_counts_sequences_not_occurrences() {
    let seqs: Vec<Vec<usize>> = vec![vec![1, 1, 2], vec![2, 3], vec![0, 1]];
    let f = FrequencyTable::from_sequences(seqs.iter().map(Vec::as_slice), 4).unwrap();
    let p = f.probabilities();
    assert_eq!(p[0], 0.0);
    assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
    assert!((p[3] - 1.0 / 3.0).abs() < 1e-15);
    let mut buf = Vec::new();
    f.write_to(&mut buf).unwrap();
    assert_eq!(FrequencyTable::read_from(&buf[..], 4).unwrap(), f);
}

#[test]
fn effective_batch_fraction_matches_frequency() {
    let f = FrequencyTable::new(vec![0.5, 0.2, 0.05, 0.9]).unwrap();
    let sim = simulate_effective_batch(&f, 8, 100_000, 9);
    for (s, p) in sim.iter().zip(f.probabilities()) {
        assert!((s - p).abs() <= 0.02 * p, "{s} vs {p}");
    }
}

#[test]
fn effective_error_formula() {
    let f = FrequencyTable::new(vec![0.0, 0.25, 1.0]).unwrap();
    let m = setup_effective_error(2.0, 16, &f).unwrap();
    assert_eq!(m.sigma_eff_weights, 2.0 / 16.0);
    assert_eq!(m.sigma_eff_embedding[1], 2.0 / (16.0 * 0.25));
    assert_eq!(m.sigma_eff_embedding[2], m.sigma_eff_weights);
    assert_eq!(m.sigma_eff_embedding[0], NEVER_SEEN_SIGMA);
}

#[test]
fn metric_examples() {
    assert_eq!(ndcg_at_k(1, 10), 1.0);
    assert_eq!(hit_at_k(1, 10), 1);
    assert!((ndcg_at_k(3, 10) - 0.5).abs() < 1e-15);
    assert_eq!((ndcg_at_k(11, 10), hit_at_k(11, 10)), (0.0, 0));
    let base = random_ndcg_at_k(200, 10);
    let direct: f64 = (1..=10).map(|r| 1.0 / 200.0 / ((r + 1) as f64).log2()).sum();
    assert!((base - direct).abs() < 1e-15);
}

proptest! {
    #[test]
    fn ndcg_is_bounded_by_hit(rank in 1usize..500, k in 1usize..50) {
        let n = ndcg_at_k(rank, k);
        prop_assert!((0.0..=1.0).contains(&n));
        prop_assert!(n <= f64::from(hit_at_k(rank, k)));
    }

    #[test]
    fn rank_is_a_permutation_position(scores in prop::collection::vec(-3i32..3, 2..30)) {
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let m = s.len() - 1;
        let mut ranks: Vec<usize> = (1..=m).map(|t| rank_of(&s, t, 1..=m)).collect();
        ranks.sort_unstable();
        prop_assert_eq!(ranks, (1..=m).collect::<Vec<_>>());
    }

    #[test]
    fn effective_error_scales_and_orders(sigma in 0.0f64..10.0, b in 1usize..512, p in 0.001f64..1.0, q in 0.001f64..1.0) {
        let f = FrequencyTable::new(vec![p, q]).unwrap();
        let m = setup_effective_error(sigma, b, &f).unwrap();
        let m2 = setup_effective_error(2.0 * sigma, b, &f).unwrap();
        prop_assert!((m2.sigma_eff_embedding[0] - 2.0 * m.sigma_eff_embedding[0]).abs() <= 1e-12 * m2.sigma_eff_embedding[0].max(1.0));
        if p < q {
            prop_assert!(m.sigma_eff_embedding[0] >= m.sigma_eff_embedding[1]);
        }
        prop_assert!(m.sigma_eff_embedding[0] >= m.sigma_eff_weights);
    }

    #[test]
    fn preprocess_is_a_fixpoint(edges in prop::collection::vec((0u64..12, 0u64..8), 20..200), k in 1usize..5) {
        let log = log_of(&edges);
        if let Ok(d) = preprocess(&log, k) {
            let mut du = vec![0usize; d.num_users()];
            let mut di = vec![0usize; d.num_items + 1];
            for (u, s) in d.sequences.iter().enumerate() {
                du[u] = s.len();
                for &t in s {
                    di[t] += 1;
                }
            }
            prop_assert!(du.iter().all(|&n| n >= k));
            prop_assert!(di[1..].iter().all(|&n| n >= k));
            let again = preprocess(&d.to_log(), k).unwrap();
            prop_assert_eq!(&again.sequences, &d.sequences);
            prop_assert_eq!(reference_core(&edges, k).len(), d.sequences.iter().map(Vec::len).sum::<usize>());
        }
    }
}
