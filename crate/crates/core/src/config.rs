//! Run configuration as flat `key=value` text.
//!
//! Lines are `key = value`; `#` starts a comment. Model keys carry a
//! `model.` prefix and data-generator keys a `data.` prefix. Later settings
//! override earlier ones, so command-line overrides are applied last.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::clipping::{ClipMode, ClipSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optimizer::{OptimizerConfig, OptimizerKind};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Synthetic Zipf sequences.
    Zipf {
        users: usize,
        items: usize,
        min_len: usize,
        max_len: usize,
        exponent: f64,
    },
    /// Tab-separated interaction log, preprocessed on load.
    Log(PathBuf),
    /// Directory written by `SequenceDataset::write_cache`.
    Cache(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    /// Minimum interactions per user and item when preprocessing logs.
    pub min_count: usize,
    /// `vocab_size` and `max_len` are filled in from the data and `max_len`.
    pub model: ModelConfig,
    pub max_len: usize,
    /// `inf` trains without noise.
    pub epsilon: f64,
    /// `None` uses one over the number of training sequences.
    pub delta: Option<f64>,
    /// Overrides the accountant when set.
    pub noise_multiplier: Option<f64>,
    pub clip_norm: f64,
    pub clip_mode: ClipMode,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub eval_batch_size: usize,
    pub re_attention: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Assert runtime invariants (clipped norms, finite losses, budget).
    pub checked: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Zipf {
                users: 500,
                items: 200,
                min_len: 5,
                max_len: 30,
                exponent: 1.0,
            },
            min_count: 5,
            model: ModelConfig::new(2, 20),
            max_len: 20,
            epsilon: 10.0,
            delta: None,
            noise_multiplier: None,
            clip_norm: 1.0,
            clip_mode: ClipMode::Normalize,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            warmup_fraction: 0.2,
            batch_size: 64,
            epochs: 100,
            eval_every: 5,
            eval_batch_size: 256,
            re_attention: false,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            checked: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Parse(format!("bad value {v:?} for {key}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, v) = (key.trim(), value.trim());
        if let Some(mk) = key.strip_prefix("model.") {
            if matches!(mk, "vocab_size" | "max_len") {
                return Err(Error::Parse(format!("{key} is derived; set `max_len` instead")));
            }
            if !self.model.set(mk, v)? {
                return Err(Error::Parse(format!("unknown key {key:?}")));
            }
            return Ok(());
        }
        if let Some(dk) = key.strip_prefix("data.") {
            let DataSource::Zipf {
                users,
                items,
                min_len,
                max_len,
                exponent,
            } = &mut self.data
            else {
                return Err(Error::Parse(format!("{key} only applies to data=zipf")));
            };
            match dk {
                "users" => *users = parse(key, v)?,
                "items" => *items = parse(key, v)?,
                "min_len" => *min_len = parse(key, v)?,
                "max_len" => *max_len = parse(key, v)?,
                "exponent" => *exponent = parse(key, v)?,
                _ => return Err(Error::Parse(format!("unknown key {key:?}"))),
            }
            return Ok(());
        }
        match key {
            "data" => {
                self.data = match v {
                    "zipf" => DataSource::Zipf {
                        users: 500,
                        items: 200,
                        min_len: 5,
                        max_len: 30,
                        exponent: 1.0,
                    },
                    _ => match v.split_once(':') {
                        Some(("log", p)) => DataSource::Log(p.into()),
                        Some(("cache", p)) => DataSource::Cache(p.into()),
                        _ => {
                            return Err(Error::Parse(format!(
                                "data must be zipf, log:PATH or cache:PATH, got {v:?}"
                            )))
                        }
                    },
                }
            }
            "min_count" => self.min_count = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "delta" => self.delta = if v == "auto" { None } else { Some(parse(key, v)?) },
            "noise_multiplier" => self.noise_multiplier = if v == "auto" { None } else { Some(parse(key, v)?) },
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "clip_mode" => self.clip_mode = v.parse()?,
            "optimizer" => self.optimizer = v.parse()?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, v)?,
            "re_attention" => self.re_attention = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "output_dir" => self.output_dir = v.into(),
            "checked" => self.checked = parse(key, v)?,
            _ => return Err(Error::Parse(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a single `key=value` assignment.
    pub fn apply_assignment(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("expected key=value, got {kv:?}")))?;
        self.set(k, v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_assignment(line)
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        match &self.data {
            DataSource::Zipf {
                users,
                items,
                min_len,
                max_len,
                exponent,
            } => {
                put("data", "zipf".into());
                put("data.users", users.to_string());
                put("data.items", items.to_string());
                put("data.min_len", min_len.to_string());
                put("data.max_len", max_len.to_string());
                put("data.exponent", exponent.to_string());
            }
            DataSource::Log(p) => put("data", format!("log:{}", p.display())),
            DataSource::Cache(p) => put("data", format!("cache:{}", p.display())),
        }
        put("min_count", self.min_count.to_string());
        for (k, v) in self.model.to_kv() {
            if k != "vocab_size" && k != "max_len" {
                put(&format!("model.{k}"), v);
            }
        }
        put("max_len", self.max_len.to_string());
        put("epsilon", self.epsilon.to_string());
        put("delta", self.delta.map_or("auto".into(), |d| d.to_string()));
        put(
            "noise_multiplier",
            self.noise_multiplier.map_or("auto".into(), |d| d.to_string()),
        );
        put("clip_norm", self.clip_norm.to_string());
        put("clip_mode", self.clip_mode.to_string());
        put("optimizer", self.optimizer.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("warmup_fraction", self.warmup_fraction.to_string());
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("eval_every", self.eval_every.to_string());
        put("eval_batch_size", self.eval_batch_size.to_string());
        put("re_attention", self.re_attention.to_string());
        put("seed", self.seed.to_string());
        put("output_dir", self.output_dir.display().to_string());
        put("checked", self.checked.to_string());
        s
    }

    pub fn clip_spec(&self) -> Result<ClipSpec> {
        ClipSpec::new(self.clip_norm, self.clip_mode)
    }

    pub fn optimizer_config(&self, total_steps: u64) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            warmup_fraction: self.warmup_fraction,
            total_steps,
            ..Default::default()
        }
    }
}
