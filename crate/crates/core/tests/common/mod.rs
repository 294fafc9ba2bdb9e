#![allow(dead_code)]

use dpformer::model::{Activation, Batch, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub model: Model<f64>,
    pub batch: Batch,
}

/// Random model and left-padded batch with B <= 8, L <= 16, M <= 64,
/// d <= 32, N <= 2.
pub fn random_case(seed: u64, tied: bool) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..=8);
    let l = rng.random_range(1..=16);
    let m = rng.random_range(3..=64);
    let heads = [1usize, 2, 4][rng.random_range(0..3)];
    let d = heads * rng.random_range(1..=32 / heads);
    let mut cfg = ModelConfig::new(m, l);
    cfg.model_dim = d;
    cfg.num_heads = heads;
    cfg.num_blocks = rng.random_range(0..=2);
    cfg.ffn_dim = rng.random_range(1..=32);
    cfg.tied_embedding = tied;
    cfg.activation = if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Gelu
    };
    let model = Model::new(cfg, rng.random()).unwrap();
    let mut tokens = Vec::with_capacity(b * l);
    for _ in 0..b {
        let pad = rng.random_range(0..l);
        for t in 0..l {
            tokens.push(if t < pad { 0 } else { rng.random_range(1..m) });
        }
    }
    let targets = (0..b).map(|_| rng.random_range(1..m)).collect();
    Case {
        model,
        batch: Batch::new(tokens, targets, l).unwrap(),
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-30)
}
