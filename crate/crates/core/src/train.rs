//! Training runs: data loading, budget calibration, the epoch loop and the
//! artifacts it leaves behind.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::config::{DataSource, RunConfig};
use crate::data::{generate_zipf, preprocess, InteractionLog, SequenceDataset};
use crate::effective::{setup_effective_error, EffectiveErrorMap};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::Model;
use crate::optimizer::{dp_step, Optimizer, StepPrivacy, StepReport};
use crate::privacy::PrivacySpec;
use crate::scalar::Scalar;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,ndcg_at_10,hit_at_10,loss,epsilon_spent";
pub const CHECKPOINT_DIR: &str = "checkpoint";

pub fn load_dataset(cfg: &RunConfig) -> Result<SequenceDataset> {
    match &cfg.data {
        DataSource::Zipf {
            users,
            items,
            min_len,
            max_len,
            exponent,
        } => generate_zipf(*users, *items, (*min_len, *max_len), *exponent, cfg.seed),
        DataSource::Log(p) => {
            let f = std::io::BufReader::new(fs::File::open(p)?);
            preprocess(&InteractionLog::read_tsv(f)?, cfg.min_count)
        }
        DataSource::Cache(p) => SequenceDataset::read_cache(p),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub eval: EvalResult,
    pub epsilon_spent: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.eval.ndcg, self.eval.hit, self.eval.loss, self.epsilon_spent
        )
    }
}

pub struct TrainOutcome<S: Scalar> {
    pub model: Model<S>,
    pub privacy: PrivacySpec,
    pub steps: Vec<StepReport>,
    pub metrics: Vec<MetricsRow>,
    pub dataset_size: usize,
}

impl<S: Scalar> TrainOutcome<S> {
    pub fn privacy_statement(&self) -> String {
        let p = &self.privacy;
        if p.noise_multiplier == 0.0 {
            return format!("non-private run: sigma_dp=0, epsilon=inf, {} steps", self.steps.len());
        }
        format!(
            "({}, {})-DP: sigma_dp={} clip_norm={} sampling_rate={} steps={} epsilon_spent={}",
            p.epsilon,
            p.delta,
            p.noise_multiplier,
            p.clip.clip_norm,
            p.sampling_rate,
            p.steps,
            p.epsilon_after(p.steps)
        )
    }
}

/// Noise level and accounting for a run over `data`.
pub fn plan_privacy(cfg: &RunConfig, data: &SequenceDataset, steps: u64) -> Result<PrivacySpec> {
    let clip = cfg.clip_spec()?;
    let n = data.num_users();
    let q = (cfg.batch_size as f64 / n as f64).min(1.0);
    let delta = cfg.delta.unwrap_or(1.0 / n as f64);
    if let Some(sigma) = cfg.noise_multiplier {
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise multiplier {sigma} must be nonnegative"
            )));
        }
        let mut p = PrivacySpec::non_private(clip);
        if sigma > 0.0 {
            p = PrivacySpec {
                epsilon: f64::NAN,
                delta,
                sampling_rate: q,
                steps,
                noise_multiplier: sigma,
                clip,
            };
            p.epsilon = p.epsilon_after(steps);
        }
        return Ok(p);
    }
    if cfg.epsilon.is_infinite() {
        return Ok(PrivacySpec::non_private(clip));
    }
    if !clip.clip_norm.is_finite() {
        return Err(Error::InvalidArgument(
            "a finite privacy budget needs a finite clip norm".into(),
        ));
    }
    PrivacySpec::calibrate(cfg.epsilon, delta, q, steps, clip)
}

/// Steps a run of `cfg` over `data` takes.
pub fn total_steps(cfg: &RunConfig, data: &SequenceDataset) -> Result<u64> {
    Ok(data.epoch_batches(cfg.batch_size, cfg.max_len, cfg.seed, 0)?.len() as u64 * cfg.epochs as u64)
}

/// Effective-error map for the run's noise level, if re-attention is on.
pub fn reattention_map(
    cfg: &RunConfig,
    data: &SequenceDataset,
    privacy: &PrivacySpec,
) -> Result<Option<EffectiveErrorMap>> {
    if !cfg.re_attention {
        return Ok(None);
    }
    setup_effective_error(privacy.noise_multiplier, cfg.batch_size, &data.frequency).map(Some)
}

fn dropout_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Trains on `data`. With `out_dir` set, writes the train log, metrics,
/// checkpoint, the resolved config and `privacy.txt`.
pub fn train<S: Scalar>(cfg: &RunConfig, data: &SequenceDataset, out_dir: Option<&Path>) -> Result<TrainOutcome<S>> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::InvalidArgument(
            "epochs, batch_size and eval_every must be positive".into(),
        ));
    }
    let mut mcfg = cfg.model.clone();
    mcfg.vocab_size = data.vocab_size();
    mcfg.max_len = cfg.max_len;
    let total = total_steps(cfg, data)?;
    let privacy = plan_privacy(cfg, data, total)?;
    let reattn = reattention_map(cfg, data, &privacy)?;
    let mut model = Model::<S>::new(mcfg, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer_config(total));
    let step_privacy = StepPrivacy {
        clip: privacy.clip,
        noise_multiplier: privacy.noise_multiplier,
        noise_seed: cfg.seed ^ 0x6E6F_6973_6500_0000,
    };

    let mut log = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            fs::write(d.join("config.txt"), cfg.to_text())?;
            let mut w = BufWriter::new(fs::File::create(d.join(TRAIN_LOG))?);
            writeln!(w, "step,loss,mean_norm,clipped_fraction,sigma_dp")?;
            Some(w)
        }
        None => None,
    };
    let mut steps = Vec::with_capacity(total as usize);
    let mut metrics = Vec::new();
    for epoch in 1..=cfg.epochs {
        for batch in data.epoch_batches(cfg.batch_size, cfg.max_len, cfg.seed, epoch as u64)? {
            let ds = (model.config.dropout > 0.0).then(|| dropout_seed(cfg.seed, opt.steps_taken()));
            let r = dp_step(&mut model, &mut opt, &batch, &step_privacy, ds, reattn.as_ref())?;
            if cfg.checked {
                if !r.loss.is_finite() {
                    return Err(Error::InvariantViolation(format!("loss {} at step {}", r.loss, r.step)));
                }
                let c = privacy.clip.clip_norm;
                if r.max_clipped_norm > c * (1.0 + 1e-9) + 1e-9 {
                    return Err(Error::InvariantViolation(format!(
                        "clipped norm {} exceeds {c} at step {}",
                        r.max_clipped_norm, r.step
                    )));
                }
            }
            if let Some(w) = log.as_mut() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    r.step, r.loss, r.mean_norm, r.clipped_fraction, r.sigma_dp
                )?;
            }
            steps.push(r);
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let eval = evaluate(&model, data, 10, cfg.eval_batch_size, reattn.as_ref())?;
            if cfg.checked && !(0.0..=1.0).contains(&eval.ndcg) {
                return Err(Error::InvariantViolation(format!("ndcg {} outside [0, 1]", eval.ndcg)));
            }
            metrics.push(MetricsRow {
                epoch,
                eval,
                epsilon_spent: privacy.epsilon_after(steps.len() as u64),
            });
        }
    }
    if cfg.checked && privacy.noise_multiplier > 0.0 && cfg.noise_multiplier.is_none() {
        let spent = privacy.epsilon_after(steps.len() as u64);
        if spent > privacy.epsilon * (1.0 + 1e-12) {
            return Err(Error::InvariantViolation(format!(
                "spent {spent} over budget {}",
                privacy.epsilon
            )));
        }
    }
    let outcome = TrainOutcome {
        model,
        privacy,
        steps,
        metrics,
        dataset_size: data.num_users(),
    };
    if let Some(d) = out_dir {
        if let Some(mut w) = log {
            w.flush()?;
        }
        write_metrics(&d.join(METRICS), &outcome.metrics)?;
        outcome.model.save(&d.join(CHECKPOINT_DIR))?;
        let mut statement = outcome.privacy_statement();
        if let Some(w) = outcome.privacy.delta_warning(outcome.dataset_size) {
            statement = format!("{statement}\nwarning: {w}");
        }
        fs::write(d.join("privacy.txt"), statement + "\n")?;
    }
    Ok(outcome)
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}
