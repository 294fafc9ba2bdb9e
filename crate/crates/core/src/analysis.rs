//! Report generators behind the analysis and benchmark commands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::clipping::{
    clip_factors, naive_per_sample_oracle, per_sample_norms, ClipMode, ClipSpec, DEFAULT_ORACLE_BYTES,
};
use crate::effective::EffectiveErrorMap;
use crate::error::{Error, Result};
use crate::meter::{AllocationMeter, PER_SAMPLE_GRAD};
use crate::model::{Activation, Batch, ForwardOptions, Model, ModelConfig};
use crate::moments::{propagate_gelu, propagate_relu, GaussianStats};
use crate::reattention::{gumbel_softmax_identity, GumbelCheck, EULER_MASCHERONI};
use crate::scalar::Scalar;
use crate::tape::Graph;
use crate::tensor::Tensor;

pub const MOMENT_INPUT_VARIANCES: [f64; 3] = [1e-4, 1e-2, 1.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentRow {
    pub input_variance: f64,
    pub activation: Activation,
    /// Output variance from moment matching.
    pub analytic: f64,
    /// Sample variance of the exact activation over the draws.
    pub sampled: f64,
}

/// Output variance of ReLU and GELU for zero-mean Gaussian inputs.
pub fn moments_table(draws: usize, seed: u64) -> Result<Vec<MomentRow>> {
    let mut rows = Vec::new();
    for (k, &v) in MOMENT_INPUT_VARIANCES.iter().enumerate() {
        let x = GaussianStats::new(Tensor::<f64>::zeros(&[1]), Tensor::full(&[1], v))?;
        for act in [Activation::Relu, Activation::Gelu] {
            let analytic = match act {
                Activation::Relu => propagate_relu(&x)?,
                Activation::Gelu => propagate_gelu(&x)?,
            }
            .var
            .data()[0];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let sd = v.sqrt();
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..draws {
                let z: f64 = StandardNormal.sample(&mut rng);
                let z = z * sd;
                let y = match act {
                    Activation::Relu => z.max(0.0),
                    Activation::Gelu => z * z.norm_cdf(),
                };
                s1 += y;
                s2 += y * y;
            }
            let n = draws as f64;
            let mean = s1 / n;
            rows.push(MomentRow {
                input_variance: v,
                activation: act,
                analytic,
                sampled: (s2 / n - mean * mean) * n / (n - 1.0),
            });
        }
    }
    Ok(rows)
}

pub fn write_moments_csv<W: Write>(w: &mut W, rows: &[MomentRow]) -> Result<()> {
    writeln!(w, "input_variance,activation,analytic,sampled_1e6")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.input_variance, r.activation, r.analytic, r.sampled)?;
    }
    Ok(())
}

/// Ten random logit vectors of length 2..=8 checked against logsumexp.
pub fn gumbel_report(vectors: usize, draws: usize, seed: u64) -> Result<Vec<(Vec<f64>, GumbelCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..vectors)
        .map(|i| {
            let n = rng.random_range(2..=8);
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c = gumbel_softmax_identity(&logits, draws, seed.wrapping_add(1 + i as u64), EULER_MASCHERONI)?;
            Ok((logits, c))
        })
        .collect()
}

pub fn write_gumbel_csv<W: Write>(w: &mut W, rows: &[(Vec<f64>, GumbelCheck)]) -> Result<()> {
    writeln!(w, "vector,logits,logsumexp,mean_max,estimate,abs_error")?;
    for (i, (x, c)) in rows.iter().enumerate() {
        let xs: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{i},{},{},{},{},{}",
            xs.join(" "),
            c.logsumexp,
            c.mean_max,
            c.estimate,
            (c.estimate - c.logsumexp).abs()
        )?;
    }
    Ok(())
}

/// Writes `attention_raw.csv` and `attention_corrected.csv`, each with one
/// row per (sample, layer, head, query position).
pub fn dump_attention<S: Scalar>(
    model: &Model<S>,
    batch: &Batch,
    reattention: Option<&EffectiveErrorMap>,
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let mut g = Graph::new(&model.params).unchecked();
    let out = model.forward(
        &mut g,
        batch,
        ForwardOptions {
            dropout_seed: None,
            reattention,
            trace: true,
        },
    )?;
    fs::create_dir_all(dir)?;
    let l = batch.len;
    let header = {
        let cols: Vec<String> = (0..l).map(|j| format!("col{j}")).collect();
        format!("sample,layer,head,row,{}", cols.join(","))
    };
    let mut paths = Vec::new();
    for (name, pick) in [("attention_raw.csv", false), ("attention_corrected.csv", true)] {
        let mut s = header.clone();
        s.push('\n');
        for b in 0..batch.batch {
            for (layer, tr) in out.traces.iter().enumerate() {
                let t = if pick { &tr.corrected_scores } else { &tr.raw_scores };
                let h = t.shape()[1];
                for head in 0..h {
                    for row in 0..l {
                        let off = ((b * h + head) * l + row) * l;
                        let vals: Vec<String> = t.data()[off..off + l].iter().map(|v| v.as_f64().to_string()).collect();
                        s.push_str(&format!("{b},{layer},{head},{row},{}\n", vals.join(",")));
                    }
                }
            }
        }
        let p = dir.join(name);
        fs::write(&p, s)?;
        paths.push(p);
    }
    let corrected = paths.pop().expect("two files");
    Ok((paths.pop().expect("two files"), corrected))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: &'static str,
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
    pub dim: usize,
    pub peak_bytes: usize,
    /// Bytes tagged as per-sample gradients.
    pub per_sample_bytes: usize,
    pub wall_ms: f64,
}

/// One-block tied model and a full-length random batch of the given size.
pub fn bench_case(batch: usize, len: usize, vocab: usize, dim: usize, seed: u64) -> Result<(Model<f64>, Batch)> {
    let mut cfg = ModelConfig::new(vocab, len);
    cfg.model_dim = dim;
    cfg.ffn_dim = dim;
    cfg.num_blocks = 1;
    let model = Model::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBE4C);
    let tokens = (0..batch * len).map(|_| rng.random_range(1..vocab)).collect();
    let targets = (0..batch).map(|_| rng.random_range(1..vocab)).collect();
    Ok((model, Batch::new(tokens, targets, len)?))
}

/// Memory and time of producing one clipped batch gradient.
///
/// Both methods end holding one aggregate gradient; the naive path sums its
/// stored per-sample gradients in place, the phantom path frees its norm
/// scratch before the second backward pass. `phantom-norms` isolates the
/// norm computation.
pub fn bench_clip(batch: usize, len: usize, vocab: usize, dim: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let (model, b) = bench_case(batch, len, vocab, dim, seed)?;
    let spec = ClipSpec::new(1.0, ClipMode::Clip)?;
    let grad_bytes = model.params.num_scalars() * std::mem::size_of::<f64>();
    let row = |method, peak_bytes, per_sample_bytes, wall_ms| BenchRow {
        method,
        batch,
        len,
        vocab,
        dim,
        peak_bytes,
        per_sample_bytes,
        wall_ms,
    };

    let meter = AllocationMeter::new();
    let t0 = Instant::now();
    let mut g = Graph::new(&model.params).unchecked();
    let out = model.forward(&mut g, &b, Default::default())?;
    let norms = {
        let bw = g.backward(out.loss, &vec![1.0; batch])?;
        per_sample_norms(&g, &bw, Some(&meter))?.total.into_data()
    };
    let norm_ms = t0.elapsed().as_secs_f64() * 1e3;
    let norm_peak = meter.peak_bytes();
    let w: Vec<f64> = clip_factors(&norms, &spec).iter().map(|c| c / batch as f64).collect();
    let bw = g.weighted_backward(out.loss, &w)?;
    let _agg = meter.charge("clipped-grad", grad_bytes);
    std::hint::black_box(bw.grad(model.ids.embedding));
    let phantom_ms = t0.elapsed().as_secs_f64() * 1e3;
    let phantom = row(
        "phantom",
        meter.peak_bytes(),
        meter.tag_peak_bytes(PER_SAMPLE_GRAD),
        phantom_ms,
    );
    let phantom_norms = row("phantom-norms", norm_peak, 0, norm_ms);

    let meter = AllocationMeter::new();
    let t0 = Instant::now();
    let mut oracle = naive_per_sample_oracle(&model, &b, DEFAULT_ORACLE_BYTES, Some(&meter))?;
    let f = clip_factors(oracle.norms.data(), &spec);
    let (first, rest) = oracle.grads.split_at_mut(1);
    for (p, acc) in first[0].iter_mut().enumerate() {
        acc.data_mut().iter_mut().for_each(|x| *x *= f[0] / batch as f64);
        for (i, gi) in rest.iter().enumerate() {
            for (a, &x) in acc.data_mut().iter_mut().zip(gi[p].data()) {
                *a += x * f[i + 1] / batch as f64;
            }
        }
    }
    let naive = row(
        "naive",
        meter.peak_bytes(),
        meter.tag_peak_bytes(PER_SAMPLE_GRAD),
        t0.elapsed().as_secs_f64() * 1e3,
    );
    // with one sample the naive per-sample gradient is the batch gradient
    if batch > 1 && vocab >= 10 * len && phantom.peak_bytes >= naive.peak_bytes {
        return Err(Error::InvariantViolation(format!(
            "phantom peak {} not below naive peak {} at M={vocab}, L={len}",
            phantom.peak_bytes, naive.peak_bytes
        )));
    }
    Ok(vec![phantom, phantom_norms, naive])
}

pub fn write_bench_csv<W: Write>(w: &mut W, rows: &[BenchRow]) -> Result<()> {
    writeln!(w, "method,B,L,M,d,peak_bytes,wall_ms")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.3}",
            r.method, r.batch, r.len, r.vocab, r.dim, r.peak_bytes, r.wall_ms
        )?;
    }
    Ok(())
}
