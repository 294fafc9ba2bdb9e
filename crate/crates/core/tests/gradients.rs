mod common;

use common::random_case;
use dpformer::model::{Batch, ForwardOptions, Model};
use dpformer::tape::Graph;
use dpformer::Tensor;

fn mean_loss(model: &Model<f64>, batch: &Batch) -> f64 {
    model.loss_and_grads(batch).unwrap().0
}

#[test]
fn model_gradients_match_central_differences() {
    for seed in [3u64, 17, 42, 99] {
        let mut case = random_case(seed, seed % 2 == 0);
        let (_, grads) = case.model.loss_and_grads(&case.batch).unwrap();
        let ids: Vec<_> = case.model.params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let n = case.model.params.get(id).numel();
            for j in [0, n / 2, n - 1] {
                let h = 1e-5;
                let x0 = case.model.params.get(id).data()[j];
                case.model.params.get_mut(id).data_mut()[j] = x0 + h;
                let up = mean_loss(&case.model, &case.batch);
                case.model.params.get_mut(id).data_mut()[j] = x0 - h;
                let dn = mean_loss(&case.model, &case.batch);
                case.model.params.get_mut(id).data_mut()[j] = x0;
                let fd = (up - dn) / (2.0 * h);
                let an = grads[k].data()[j];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-4 * an.abs(),
                    "seed {seed} param {} [{j}]: fd {fd} vs analytic {an}",
                    case.model.params.name(id)
                );
            }
        }
    }
}

fn weighted_grads(model: &Model<f64>, batch: &Batch, w: &[f64]) -> Vec<Tensor<f64>> {
    let mut g = Graph::new(&model.params);
    let out = model.forward(&mut g, batch, ForwardOptions::default()).unwrap();
    let bw = g.weighted_backward(out.loss, w).unwrap();
    model
        .params
        .ids()
        .map(|id| bw.grad_or_zeros(&model.params, id))
        .collect()
}

#[test]
fn weighted_backward_is_linear_in_weights() {
    let case = random_case(5, true);
    let b = case.batch.batch;
    let w1: Vec<f64> = (0..b).map(|i| 0.3 + i as f64).collect();
    let w2: Vec<f64> = (0..b).map(|i| 0.7 * ((i * 5) % 3) as f64).collect();
    let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, c)| 2.0 * a + c).collect();
    let (g1, g2, gs) = (
        weighted_grads(&case.model, &case.batch, &w1),
        weighted_grads(&case.model, &case.batch, &w2),
        weighted_grads(&case.model, &case.batch, &sum),
    );
    for k in 0..gs.len() {
        let combo = g1[k].scale(2.0).add(&g2[k]).unwrap();
        assert!(combo.max_abs_diff(&gs[k]) < 1e-10);
    }
}

#[test]
fn one_hot_weights_give_single_sample_gradient() {
    let case = random_case(8, true);
    let b = case.batch.batch;
    assert!(b >= 2);
    for i in 0..b {
        let mut w = vec![0.0; b];
        w[i] = 1.0;
        let gi = weighted_grads(&case.model, &case.batch, &w);
        let (_, alone) = case.model.loss_and_grads(&case.batch.sample(i)).unwrap();
        for (a, c) in gi.iter().zip(&alone) {
            assert!(a.max_abs_diff(c) < 1e-12);
        }
    }
}

#[test]
fn tied_gradient_is_sum_of_untied_path_gradients() {
    let case = random_case(21, true);
    let untied = case.model.untie().unwrap();
    let (lt, gt) = case.model.loss_and_grads(&case.batch).unwrap();
    let (lu, gu) = untied.loss_and_grads(&case.batch).unwrap();
    assert!((lt - lu).abs() < 1e-12);
    let e = case.model.ids.embedding;
    let te = gt[e.0].clone();
    let ue = gu[untied.ids.embedding.0]
        .add(&gu[untied.ids.output_embedding.unwrap().0])
        .unwrap();
    assert!(te.max_abs_diff(&ue) < 1e-12);
}

#[test]
fn encoder_is_causal() {
    let mut tested = 0;
    for seed in 30..50 {
        tested += usize::from(check_causal(seed));
    }
    assert!(tested >= 5);
}

fn check_causal(seed: u64) -> bool {
    let case = random_case(seed, true);
    let (b, l) = (case.batch.batch, case.batch.len);
    if l < 2 || case.model.config.num_blocks == 0 {
        return false;
    }
    let encode = |batch: &Batch| {
        let mut g = Graph::new(&case.model.params);
        let out = case.model.forward(&mut g, batch, ForwardOptions::default()).unwrap();
        g.value(out.encoded).clone()
    };
    let base = encode(&case.batch);
    let mut tokens = case.batch.tokens.clone();
    let m = case.model.config.vocab_size;
    for i in 0..b {
        let t = &mut tokens[i * l + l - 1];
        *t = 1 + *t % (m - 1);
    }
    let changed = encode(&Batch::new(tokens, case.batch.targets.clone(), l).unwrap());
    let d = case.model.config.model_dim;
    for i in 0..b {
        for t in 0..l - 1 {
            let off = (i * l + t) * d;
            assert_eq!(&base.data()[off..off + d], &changed.data()[off..off + d]);
        }
    }
    true
}
