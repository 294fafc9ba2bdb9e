//! Causal Transformer encoder for next-token prediction.
//!
//! Tokens are embedded through a table `E`, a learned positional table is
//! added, and `N` pre-norm blocks (self-attention then feed-forward) run with
//! a causal mask. The encoder output at the last position is scored against
//! every row of the output embedding, which is `E` itself when tied.
//!
//! Token id 0 is padding: it embeds to zero, is hidden as a key from every
//! other position, and never appears as a target. Sequences are left-padded
//! so the last position always holds a real token.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::effective::EffectiveErrorMap;
use crate::error::{shape_err, Error, Result};
use crate::moments::{
    propagate_add, propagate_attention_mix, propagate_dropout, propagate_gelu, propagate_layer_norm, propagate_linear,
    propagate_relu, scalarize_key_variance, GaussianStats,
};
use crate::reattention::{masked_softmax, AttentionTrace};
use crate::scalar::Scalar;
use crate::tape::{AttentionMask, Graph, NodeId, ParamId, ParamStore};
use crate::tensor::{read_u32, Tensor};

pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            _ => Err(Error::Parse(format!("unknown activation {s:?}"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Gelu => "gelu",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Vocabulary size including the padding id.
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub tied_embedding: bool,
    pub activation: Activation,
    /// Hidden width of the feed-forward sublayer.
    pub ffn_dim: usize,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            model_dim: 64,
            num_heads: 1,
            num_blocks: 2,
            max_len,
            dropout: 0.0,
            tied_embedding: true,
            activation: Activation::Gelu,
            ffn_dim: 64,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.max_len < 1 || self.model_dim < 1 || self.num_heads < 1 || self.ffn_dim < 1 {
            return bad("max_len, model_dim, num_heads and ffn_dim must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("model_dim".into(), self.model_dim.to_string()),
            ("num_heads".into(), self.num_heads.to_string()),
            ("num_blocks".into(), self.num_blocks.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("tied_embedding".into(), self.tied_embedding.to_string()),
            ("activation".into(), self.activation.to_string()),
            ("ffn_dim".into(), self.ffn_dim.to_string()),
            ("layer_norm_eps".into(), self.layer_norm_eps.to_string()),
        ]
    }

    /// Applies one `key=value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad value {v:?} for {k}")))
        }
        match key {
            "vocab_size" => self.vocab_size = p(key, value)?,
            "model_dim" => self.model_dim = p(key, value)?,
            "num_heads" => self.num_heads = p(key, value)?,
            "num_blocks" => self.num_blocks = p(key, value)?,
            "max_len" => self.max_len = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "tied_embedding" => self.tied_embedding = p(key, value)?,
            "activation" => self.activation = value.trim().parse()?,
            "ffn_dim" => self.ffn_dim = p(key, value)?,
            "layer_norm_eps" => self.layer_norm_eps = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// `[B, L]` token matrix plus one target per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    pub fn new(tokens: Vec<usize>, targets: Vec<usize>, len: usize) -> Result<Self> {
        if len == 0 || !tokens.len().is_multiple_of(len) || tokens.len() / len != targets.len() || targets.is_empty() {
            return Err(shape_err(
                "Batch::new",
                format!("{} tokens, {} targets, len {len}", tokens.len(), targets.len()),
            ));
        }
        let batch = targets.len();
        Ok(Self {
            tokens,
            targets,
            batch,
            len,
        })
    }

    /// Left-pads (or keeps the most recent `len` tokens of) each history.
    pub fn from_histories(histories: &[&[usize]], targets: Vec<usize>, len: usize) -> Result<Self> {
        let mut tokens = Vec::with_capacity(histories.len() * len);
        for h in histories {
            if h.is_empty() {
                return Err(Error::InvalidArgument("empty history".into()));
            }
            let tail = &h[h.len().saturating_sub(len)..];
            tokens.extend(std::iter::repeat_n(PAD, len - tail.len()));
            tokens.extend_from_slice(tail);
        }
        Self::new(tokens, targets, len)
    }

    pub fn sample(&self, i: usize) -> Batch {
        Batch {
            tokens: self.tokens[i * self.len..(i + 1) * self.len].to_vec(),
            targets: vec![self.targets[i]],
            batch: 1,
            len: self.len,
        }
    }

    pub fn is_pad(&self) -> Vec<bool> {
        self.tokens.iter().map(|&t| t == PAD).collect()
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.len != cfg.max_len {
            return Err(shape_err(
                "batch",
                format!("length {} vs max_len {}", self.len, cfg.max_len),
            ));
        }
        for &t in self.tokens.iter().chain(&self.targets) {
            if t >= cfg.vocab_size {
                return Err(Error::IndexOutOfRange {
                    index: t,
                    size: cfg.vocab_size,
                });
            }
        }
        for b in 0..self.batch {
            if self.tokens[(b + 1) * self.len - 1] == PAD {
                return Err(Error::InvalidArgument(format!("sample {b} ends in padding")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct ParamIds {
    pub embedding: ParamId,
    pub output_embedding: Option<ParamId>,
    pub positional: ParamId,
    pub blocks: Vec<BlockParams>,
    pub lnf_gain: ParamId,
    pub lnf_bias: ParamId,
}

impl ParamIds {
    /// The table scored against the encoder output.
    pub fn scoring_table(&self) -> ParamId {
        self.output_embedding.unwrap_or(self.embedding)
    }
}

#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub ids: ParamIds,
}

/// Per-forward switches.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Seed for the dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
    /// Enables the variance-aware attention correction.
    pub reattention: Option<&'a EffectiveErrorMap>,
    /// Records raw and corrected attention for every layer.
    pub trace: bool,
}

#[derive(Debug)]
pub struct ModelOutput<S> {
    /// `[B, L, d]` after the final layer norm.
    pub encoded: NodeId,
    /// `[B, d]` at the last position.
    pub pooled: NodeId,
    /// `[B, M]`
    pub scores: NodeId,
    /// `[B]`
    pub loss: NodeId,
    pub traces: Vec<AttentionTrace<S>>,
}

fn init_normal<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| S::cast(rng.sample(dist)))
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d, f, l) = (config.vocab_size, config.model_dim, config.ffn_dim, config.max_len);
        let emb_std = 1.0 / (d as f64).sqrt();
        let mut ps = ParamStore::new();
        let mut emb = init_normal::<S>(&mut rng, &[m, d], emb_std);
        emb.data_mut()[..d].iter_mut().for_each(|v| *v = S::zero());
        let embedding = ps.add("embedding", emb);
        let output_embedding = if config.tied_embedding {
            None
        } else {
            Some(ps.add("output_embedding", init_normal(&mut rng, &[m, d], emb_std)))
        };
        let positional = ps.add("positional", init_normal(&mut rng, &[l, d], emb_std));
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let mut lin = |ps: &mut ParamStore<S>, name: &str, p: usize, q: usize| {
                let w = ps.add(
                    format!("block{i}.{name}.weight"),
                    init_normal(&mut rng, &[p, q], 1.0 / (p as f64).sqrt()),
                );
                let b = ps.add(format!("block{i}.{name}.bias"), Tensor::zeros(&[q]));
                (w, b)
            };
            let ln1_gain = ps.add(format!("block{i}.ln1.gain"), Tensor::full(&[d], S::one()));
            let ln1_bias = ps.add(format!("block{i}.ln1.bias"), Tensor::zeros(&[d]));
            let (wq, bq) = lin(&mut ps, "query", d, d);
            let (wk, bk) = lin(&mut ps, "key", d, d);
            let (wv, bv) = lin(&mut ps, "value", d, d);
            let (wo, bo) = lin(&mut ps, "attn_out", d, d);
            let ln2_gain = ps.add(format!("block{i}.ln2.gain"), Tensor::full(&[d], S::one()));
            let ln2_bias = ps.add(format!("block{i}.ln2.bias"), Tensor::zeros(&[d]));
            let (w1, b1) = lin(&mut ps, "ffn_in", d, f);
            let (w2, b2) = lin(&mut ps, "ffn_out", f, d);
            blocks.push(BlockParams {
                ln1_gain,
                ln1_bias,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_gain,
                ln2_bias,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let lnf_gain = ps.add("final_ln.gain", Tensor::full(&[d], S::one()));
        let lnf_bias = ps.add("final_ln.bias", Tensor::zeros(&[d]));
        Ok(Self {
            config,
            params: ps,
            ids: ParamIds {
                embedding,
                output_embedding,
                positional,
                blocks,
                lnf_gain,
                lnf_bias,
            },
        })
    }

    /// Unties a tied model: the output table starts as a copy of `E`.
    pub fn untie(&self) -> Result<Self> {
        if !self.config.tied_embedding {
            return Ok(self.clone());
        }
        let mut config = self.config.clone();
        config.tied_embedding = false;
        let mut ps = ParamStore::new();
        let mut map = BTreeMap::new();
        for (id, name, t) in self.params.iter() {
            map.insert(id, ps.add(name, t.clone()));
        }
        let out = ps.add("output_embedding", self.params.get(self.ids.embedding).clone());
        let remap = |id: ParamId| map[&id];
        let ids = ParamIds {
            embedding: remap(self.ids.embedding),
            output_embedding: Some(out),
            positional: remap(self.ids.positional),
            blocks: self
                .ids
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_gain: remap(b.ln1_gain),
                    ln1_bias: remap(b.ln1_bias),
                    wq: remap(b.wq),
                    bq: remap(b.bq),
                    wk: remap(b.wk),
                    bk: remap(b.bk),
                    wv: remap(b.wv),
                    bv: remap(b.bv),
                    wo: remap(b.wo),
                    bo: remap(b.bo),
                    ln2_gain: remap(b.ln2_gain),
                    ln2_bias: remap(b.ln2_bias),
                    w1: remap(b.w1),
                    b1: remap(b.b1),
                    w2: remap(b.w2),
                    b2: remap(b.b2),
                })
                .collect(),
            lnf_gain: remap(self.ids.lnf_gain),
            lnf_bias: remap(self.ids.lnf_bias),
        };
        Ok(Self {
            config,
            params: ps,
            ids,
        })
    }

    fn dropout<'p>(&self, g: &mut Graph<'p, S>, x: NodeId, rng: &mut Option<ChaCha8Rng>) -> Result<NodeId> {
        let rate = self.config.dropout;
        let Some(r) = rng.as_mut() else { return Ok(x) };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = S::cast(1.0 / (1.0 - rate));
        let shape = g.value(x).shape().to_vec();
        let mask = Tensor::from_fn(&shape, |_| if r.random::<f64>() < rate { S::zero() } else { keep });
        g.mul_const(x, mask)
    }

    fn input_stats(&self, batch: &Batch, x0: &Tensor<S>, map: &EffectiveErrorMap) -> Result<GaussianStats<S>> {
        let d = self.config.model_dim;
        let wv = map.weight_variance();
        let var = Tensor::from_fn(x0.shape(), |k| {
            let tok = batch.tokens[k / d];
            let e = if tok == PAD { 0.0 } else { map.embedding_variance(tok) };
            S::cast(e + wv)
        });
        GaussianStats::new(x0.clone(), var)
    }

    /// Builds the forward pass into `g`.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p, S>,
        batch: &Batch,
        opts: ForwardOptions<'_>,
    ) -> Result<ModelOutput<S>> {
        batch.validate(&self.config)?;
        let cfg = &self.config;
        let (b, l, h) = (batch.batch, batch.len, cfg.num_heads);
        let dh = cfg.head_dim();
        let eps = S::cast(cfg.layer_norm_eps);
        let scale = S::one() / S::cast(dh as f64).sqrt();
        let mut rng = opts.dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let drop_rate = if rng.is_some() { S::cast(cfg.dropout) } else { S::zero() };

        let idx: Vec<Option<usize>> = batch.tokens.iter().map(|&t| (t != PAD).then_some(t)).collect();
        let tok = g.gather(self.ids.embedding, idx, &[b, l])?;
        let pos_idx: Vec<Option<usize>> = (0..b * l).map(|k| Some(k % l)).collect();
        let pos = g.gather(self.ids.positional, pos_idx, &[b, l])?;
        let mut x = g.add(tok, pos)?;
        x = self.dropout(g, x, &mut rng)?;
        let mask = AttentionMask::causal(b, l, &batch.is_pad());

        let weight_stats = |id: ParamId| -> Result<GaussianStats<S>> {
            opts.reattention
                .expect("weight stats only with re-attention")
                .weight_stats(self.params.get(id))
        };
        let mut stats = match opts.reattention {
            Some(map) => Some(propagate_dropout(
                &self.input_stats(batch, g.value(x), map)?,
                drop_rate,
            )?),
            None => None,
        };

        let mut traces = Vec::new();
        for bp in &self.ids.blocks {
            let hn = g.layer_norm(x, bp.ln1_gain, bp.ln1_bias, eps)?;
            let q = g.linear(hn, bp.wq, Some(bp.bq), false)?;
            let k = g.linear(hn, bp.wk, Some(bp.bk), false)?;
            let v = g.linear(hn, bp.wv, Some(bp.bv), false)?;
            let (q, k, v) = (g.split_heads(q, h)?, g.split_heads(k, h)?, g.split_heads(v, h)?);
            let raw_logits = g.batch_matmul(q, k, true)?;
            let mut logits = g.scale(raw_logits, scale)?;

            let mut h_stats = None;
            let mut key_var = None;
            if let Some(sx) = &stats {
                let hs = propagate_layer_norm(sx, &weight_stats(bp.ln1_gain)?, &weight_stats(bp.ln1_bias)?, eps)?;
                let ks = propagate_linear(&hs, &weight_stats(bp.wk)?, Some(&weight_stats(bp.bk)?))?;
                let kv = scalarize_key_variance(&ks, h)?;
                let shift = g.variance_shift(q, kv.clone(), scale * scale * S::cast(0.5))?;
                logits = g.add(logits, shift)?;
                h_stats = Some(hs);
                key_var = Some(kv);
            }
            let attn = g.softmax(logits, Some(mask.clone()))?;

            if opts.trace {
                let scaled = g.value(raw_logits).scale(scale);
                let mut raw = vec![S::zero(); b * h * l * l];
                for bi in 0..b {
                    for hi in 0..h {
                        for i in 0..l {
                            let r = ((bi * h + hi) * l + i) * l;
                            let row = masked_softmax(&scaled.data()[r..r + l], |j| mask.allowed[(bi * l + i) * l + j]);
                            raw[r..r + l].copy_from_slice(&row);
                        }
                    }
                }
                let qv = g.value(q);
                let energy = Tensor::from_fn(&[b, h, l], |r| {
                    let qi = &qv.data()[r * dh..(r + 1) * dh];
                    scale * scale * qi.iter().fold(S::zero(), |a, &v| a + v * v)
                });
                traces.push(AttentionTrace {
                    raw_scores: Tensor::from_parts(vec![b, h, l, l], raw),
                    corrected_scores: g.value(attn).clone(),
                    key_variance: key_var.clone().unwrap_or_else(|| Tensor::zeros(&[b, h, l])),
                    query_energy: energy,
                });
            }

            let mixed = g.batch_matmul(attn, v, false)?;
            let merged = g.merge_heads(mixed)?;
            let o = g.linear(merged, bp.wo, Some(bp.bo), false)?;
            let o = self.dropout(g, o, &mut rng)?;
            let x_mid = g.add(x, o)?;

            let hn2 = g.layer_norm(x_mid, bp.ln2_gain, bp.ln2_bias, eps)?;
            let f1 = g.linear(hn2, bp.w1, Some(bp.b1), false)?;
            let a = match cfg.activation {
                Activation::Relu => g.relu(f1)?,
                Activation::Gelu => g.gelu(f1)?,
            };
            let f2 = g.linear(a, bp.w2, Some(bp.b2), false)?;
            let f2 = self.dropout(g, f2, &mut rng)?;
            let x_next = g.add(x_mid, f2)?;

            if let (Some(sx), Some(hs)) = (&stats, &h_stats) {
                let vs = propagate_linear(hs, &weight_stats(bp.wv)?, Some(&weight_stats(bp.bv)?))?;
                let vs = split_stats(&vs, h)?;
                let mixed_s = propagate_attention_mix(&vs, g.value(attn))?;
                let merged_s = merge_stats(&mixed_s)?;
                let os = propagate_linear(&merged_s, &weight_stats(bp.wo)?, Some(&weight_stats(bp.bo)?))?;
                let mid = propagate_add(sx, &propagate_dropout(&os, drop_rate)?)?;
                let h2 = propagate_layer_norm(&mid, &weight_stats(bp.ln2_gain)?, &weight_stats(bp.ln2_bias)?, eps)?;
                let f1s = propagate_linear(&h2, &weight_stats(bp.w1)?, Some(&weight_stats(bp.b1)?))?;
                let acts = match cfg.activation {
                    Activation::Relu => propagate_relu(&f1s)?,
                    Activation::Gelu => propagate_gelu(&f1s)?,
                };
                let f2s = propagate_linear(&acts, &weight_stats(bp.w2)?, Some(&weight_stats(bp.b2)?))?;
                stats = Some(propagate_add(&mid, &propagate_dropout(&f2s, drop_rate)?)?);
            }
            x = x_next;
        }

        let encoded = g.layer_norm(x, self.ids.lnf_gain, self.ids.lnf_bias, eps)?;
        let pooled = g.select_position(encoded, l - 1)?;
        let scores = g.linear(pooled, self.ids.scoring_table(), None, true)?;
        let loss = g.cross_entropy(scores, batch.targets.clone())?;
        Ok(ModelOutput {
            encoded,
            pooled,
            scores,
            loss,
            traces,
        })
    }

    /// Mean loss and parameter gradients without dropout or correction.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(S, Vec<Tensor<S>>)> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, batch, ForwardOptions::default())?;
        let bw = g.forward_backward(out.loss)?;
        let loss = g.value(out.loss).sum() / S::cast(batch.batch as f64);
        let grads = self.params.ids().map(|id| bw.grad_or_zeros(&self.params, id)).collect();
        Ok((loss, grads))
    }

    /// `[B, M]` scores for a batch, without dropout.
    pub fn scores(&self, batch: &Batch, reattention: Option<&EffectiveErrorMap>) -> Result<Tensor<S>> {
        let mut g = Graph::new(&self.params).unchecked();
        let out = self.forward(
            &mut g,
            batch,
            ForwardOptions {
                reattention,
                ..Default::default()
            },
        )?;
        Ok(g.value(out.scores).clone())
    }

    /// Writes `config.txt` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut cfg = String::new();
        for (k, v) in self.config.to_kv() {
            cfg.push_str(&format!("{k}={v}\n"));
        }
        fs::write(dir.join("config.txt"), cfg)?;
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join("params.bin"))?);
        write_params(&mut f, &self.params)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("config.txt"))?;
        let mut config = ModelConfig::new(2, 1);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad config line {line:?}")))?;
            if !config.set(k.trim(), v)? {
                return Err(Error::Parse(format!("unknown model key {k:?}")));
            }
        }
        let mut model = Self::new(config, 0)?;
        let mut f = std::io::BufReader::new(fs::File::open(dir.join("params.bin"))?);
        let loaded = read_params::<S, _>(&mut f)?;
        for (name, t) in loaded {
            let id = model
                .params
                .id_of(&name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {name:?}")))?;
            if model.params.get(id).shape() != t.shape() {
                return Err(shape_err("Model::load", format!("{name}: {:?}", t.shape())));
            }
            *model.params.get_mut(id) = t;
        }
        Ok(model)
    }
}

const MAGIC: &[u8; 4] = b"DPFP";

/// Index (`count`, then `name_len, name, offset` per entry) followed by the
/// tensors; offsets are relative to the end of the index.
pub fn write_params<S: Scalar, W: Write>(w: &mut W, params: &ParamStore<S>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for (_, name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&offset.to_le_bytes())?;
        offset += t.encoded_len() as u64;
    }
    for (_, _, t) in params.iter() {
        t.write_to(w)?;
    }
    Ok(())
}

pub fn read_params<S: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<S>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a parameter file".into()));
    }
    let n = read_u32(r)? as usize;
    let mut index = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u32(r)? as usize;
        if len > 1 << 16 {
            return Err(Error::Format("implausible name length".into()));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let mut off = [0u8; 8];
        r.read_exact(&mut off)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not utf-8".into()))?;
        index.push((name, u64::from_le_bytes(off)));
    }
    let mut out = Vec::with_capacity(n);
    let mut pos = 0u64;
    for (name, off) in index {
        if off != pos {
            return Err(Error::Format(format!("offset mismatch for {name}")));
        }
        let t = Tensor::read_from(r)?;
        pos += t.encoded_len() as u64;
        out.push((name, t));
    }
    Ok(out)
}

fn split_tensor<S: Scalar>(x: &Tensor<S>, heads: usize) -> Tensor<S> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = d / heads;
    let mut out = vec![S::zero(); b * l * d];
    for bi in 0..b {
        for t in 0..l {
            for hi in 0..heads {
                let src = (bi * l + t) * d + hi * dh;
                let dst = ((bi * heads + hi) * l + t) * dh;
                out[dst..dst + dh].copy_from_slice(&x.data()[src..src + dh]);
            }
        }
    }
    Tensor::from_parts(vec![b, heads, l, dh], out)
}

fn merge_tensor<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (b, heads, l, dh) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let d = heads * dh;
    let mut out = vec![S::zero(); b * l * d];
    for bi in 0..b {
        for hi in 0..heads {
            for t in 0..l {
                let src = ((bi * heads + hi) * l + t) * dh;
                let dst = (bi * l + t) * d + hi * dh;
                out[dst..dst + dh].copy_from_slice(&x.data()[src..src + dh]);
            }
        }
    }
    Tensor::from_parts(vec![b, l, d], out)
}

fn split_stats<S: Scalar>(x: &GaussianStats<S>, heads: usize) -> Result<GaussianStats<S>> {
    if x.mean.rank() != 3 || !x.shape()[2].is_multiple_of(heads) {
        return Err(shape_err("split_stats", format!("{:?}", x.shape())));
    }
    Ok(GaussianStats {
        mean: split_tensor(&x.mean, heads),
        var: split_tensor(&x.var, heads),
    })
}

fn merge_stats<S: Scalar>(x: &GaussianStats<S>) -> Result<GaussianStats<S>> {
    if x.mean.rank() != 4 {
        return Err(shape_err("merge_stats", format!("{:?}", x.shape())));
    }
    Ok(GaussianStats {
        mean: merge_tensor(&x.mean),
        var: merge_tensor(&x.var),
    })
}
