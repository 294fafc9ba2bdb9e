//! Differentially private parameter updates.
//!
//! One step computes per-sample norms from a unit-weight backward pass,
//! rescales each sample's loss by `clip_i / B` in a second backward pass,
//! adds `N(0, (σ C / B)²)` noise per coordinate and hands the result to SGD
//! or Adam.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::clipping::{clip_factors, per_sample_norms, ClipMode, ClipSpec};
use crate::effective::EffectiveErrorMap;
use crate::error::{Error, Result};
use crate::model::{Batch, ForwardOptions, Model};
use crate::scalar::Scalar;
use crate::tape::Graph;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Parse(format!("unknown optimizer {s:?}"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// L2 penalty added to the privatized gradient.
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent in linear warm-up.
    pub warmup_fraction: f64,
    /// Schedule length; `0` keeps the learning rate constant.
    pub total_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            warmup_fraction: 0.2,
            total_steps: 0,
        }
    }
}

impl OptimizerConfig {
    /// Plain constant-rate SGD.
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay: 0.0,
            warmup_fraction: 0.0,
            ..Default::default()
        }
    }

    /// Linear warm-up from `lr / warm` to `lr`, then linear decay.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.learning_rate;
        }
        let total = self.total_steps as f64;
        let warm = (self.warmup_fraction * total).round();
        let t = step as f64;
        if t < warm {
            self.learning_rate * (t + 1.0) / warm
        } else {
            self.learning_rate * ((total - t) / (total - warm)).max(0.0)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    pub config: OptimizerConfig,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with gradients ordered like `params`.
    pub fn apply(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>]) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        let lr = self.config.learning_rate_at(self.step);
        let lr_s = S::cast(lr);
        let wd = S::cast(self.config.weight_decay);
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, &dx) in p.data_mut().iter_mut().zip(g.data()) {
                        let dx = if self.config.weight_decay != 0.0 {
                            dx + wd * *x
                        } else {
                            dx
                        };
                        *x -= lr_s * dx;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                    self.v = self.m.clone();
                }
                let (b1, b2) = (S::cast(self.config.beta1), S::cast(self.config.beta2));
                let t = (self.step + 1) as i32;
                let c1 = S::one() - b1.powi(t);
                let c2 = S::one() - b2.powi(t);
                let eps = S::cast(self.config.adam_eps);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        let dx = g.data()[j] + wd * *x;
                        m[j] = b1 * m[j] + (S::one() - b1) * dx;
                        v[j] = b2 * v[j] + (S::one() - b2) * dx * dx;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *x -= lr_s * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

/// Standard-normal stream for `step`, independent of any data.
pub fn noise_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Adds `N(0, (sigma C / B)²)` to every coordinate, in parameter order.
pub fn add_noise<S: Scalar>(
    grads: &mut [Tensor<S>],
    sigma: f64,
    clip_norm: f64,
    batch: usize,
    seed: u64,
    step: u64,
) -> Result<()> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise multiplier {sigma} must be nonnegative"
        )));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    if !clip_norm.is_finite() {
        return Err(Error::InvalidArgument("noise needs a finite clip norm".into()));
    }
    let std = sigma * clip_norm / batch as f64;
    let mut rng = noise_rng(seed, step);
    for g in grads {
        for x in g.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x += S::cast(std * z);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepPrivacy {
    pub clip: ClipSpec,
    pub noise_multiplier: f64,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub mean_norm: f64,
    pub max_norm: f64,
    /// Fraction of samples whose norm exceeded the clip norm.
    pub clipped_fraction: f64,
    /// Largest per-sample norm after clipping; at most `C` by construction.
    pub max_clipped_norm: f64,
    pub sigma_dp: f64,
    pub learning_rate: f64,
}

/// Privatized mean gradient for one batch, with the per-sample norms used.
pub fn private_gradient<S: Scalar>(
    model: &Model<S>,
    batch: &Batch,
    privacy: &StepPrivacy,
    step: u64,
    dropout_seed: Option<u64>,
    reattention: Option<&EffectiveErrorMap>,
) -> Result<(Vec<Tensor<S>>, Vec<S>, S)> {
    let mut g = Graph::new(&model.params).unchecked();
    let out = model.forward(
        &mut g,
        batch,
        ForwardOptions {
            dropout_seed,
            reattention,
            trace: false,
        },
    )?;
    let b = batch.batch;
    let ones = vec![S::one(); b];
    let norms = {
        let bw = g.backward(out.loss, &ones)?;
        per_sample_norms(&g, &bw, None)?.total.into_data()
    };
    if norms.iter().any(|n| !n.is_finite()) {
        return Err(Error::NonFinite("per-sample norms"));
    }
    let inv_b = S::one() / S::cast(b as f64);
    let weights: Vec<S> = clip_factors(&norms, &privacy.clip)
        .into_iter()
        .map(|c| c * inv_b)
        .collect();
    let bw = g.weighted_backward(out.loss, &weights)?;
    let mut grads: Vec<Tensor<S>> = model
        .params
        .ids()
        .map(|id| bw.grad_or_zeros(&model.params, id))
        .collect();
    add_noise(
        &mut grads,
        privacy.noise_multiplier,
        privacy.clip.clip_norm,
        b,
        privacy.noise_seed,
        step,
    )?;
    let loss = g.value(out.loss).sum() * inv_b;
    Ok((grads, norms, loss))
}

/// One private update of `model`.
pub fn dp_step<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut Optimizer<S>,
    batch: &Batch,
    privacy: &StepPrivacy,
    dropout_seed: Option<u64>,
    reattention: Option<&EffectiveErrorMap>,
) -> Result<StepReport> {
    let step = opt.steps_taken();
    let (grads, norms, loss) = private_gradient(model, batch, privacy, step, dropout_seed, reattention)?;
    for g in &grads {
        g.check_finite("private gradient")?;
    }
    let mut refs = model.params.tensors_mut();
    let lr = opt.apply(&mut refs, &grads)?;
    let n64: Vec<f64> = norms.iter().map(|n| n.as_f64()).collect();
    let c = privacy.clip.clip_norm;
    let clipped = match privacy.clip.mode {
        ClipMode::Clip => n64.iter().filter(|&&n| n > c).count(),
        ClipMode::Normalize => n64.len(),
    };
    let factors = clip_factors(&norms, &privacy.clip);
    let max_clipped_norm = norms
        .iter()
        .zip(&factors)
        .fold(0.0f64, |a, (n, f)| a.max((*n * *f).as_f64()));
    Ok(StepReport {
        step,
        max_clipped_norm,
        loss: loss.as_f64(),
        mean_norm: n64.iter().sum::<f64>() / n64.len() as f64,
        max_norm: n64.iter().fold(0.0, |a, &b| a.max(b)),
        clipped_fraction: clipped as f64 / n64.len() as f64,
        sigma_dp: privacy.noise_multiplier,
        learning_rate: lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = OptimizerConfig {
            learning_rate: 1.0,
            total_steps: 10,
            ..Default::default()
        };
        assert!((c.learning_rate_at(0) - 0.5).abs() < 1e-12);
        assert!((c.learning_rate_at(1) - 1.0).abs() < 1e-12);
        assert!((c.learning_rate_at(6) - 0.5).abs() < 1e-12);
        assert!(c.learning_rate_at(9) > 0.0);
    }

    #[test]
    fn noise_is_data_independent() {
        let mut a = vec![Tensor::<f64>::zeros(&[3, 2])];
        let mut b = vec![Tensor::<f64>::full(&[3, 2], 5.0)];
        add_noise(&mut a, 1.0, 1.0, 4, 9, 3).unwrap();
        add_noise(&mut b, 1.0, 1.0, 4, 9, 3).unwrap();
        for (x, y) in a[0].data().iter().zip(b[0].data()) {
            assert!((x - (y - 5.0)).abs() < 1e-12);
        }
        let mut c = vec![Tensor::<f64>::zeros(&[3, 2])];
        add_noise(&mut c, 1.0, 1.0, 4, 9, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn negative_sigma_rejected() {
        let mut a = vec![Tensor::<f64>::zeros(&[1])];
        assert!(add_noise(&mut a, -1.0, 1.0, 1, 0, 0).is_err());
    }
}
