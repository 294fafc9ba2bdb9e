//! Per-sample gradient norms from layer captures, without forming any
//! per-sample gradient.
//!
//! For a linear layer traversed with per-sample input `a_i: [T, p]` and
//! output gradient `b_i: [T, q]`, the per-sample weight gradient is
//! `a_iᵀ b_i` and its squared norm is `⟨a_i a_iᵀ, b_i b_iᵀ⟩`, two `T × T`
//! Gram matrices. A tied embedding is reached twice, once through the input
//! gather and once through the output scoring, so its squared norm has the
//! two path norms plus twice their inner product.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::meter::{AllocationMeter, PER_SAMPLE_GRAD};
use crate::model::{Batch, Model};
use crate::scalar::Scalar;
use crate::tape::{Backward, Capture, CaptureInput, CaptureKind, Graph, NodeId, ParamId, ParamStore};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipMode {
    /// Scale by `min(C / ∥g∥, 1)`.
    Clip,
    /// Scale every gradient to norm `C`.
    Normalize,
}

impl std::str::FromStr for ClipMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clip" => Ok(Self::Clip),
            "normalize" => Ok(Self::Normalize),
            _ => Err(Error::Parse(format!("unknown clip mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for ClipMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Clip => "clip",
            Self::Normalize => "normalize",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipSpec {
    /// May be `f64::INFINITY` (no clipping) in `Clip` mode.
    pub clip_norm: f64,
    pub mode: ClipMode,
}

impl ClipSpec {
    pub fn new(clip_norm: f64, mode: ClipMode) -> Result<Self> {
        if !(clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "clip norm {clip_norm} must be positive"
            )));
        }
        if mode == ClipMode::Normalize && !clip_norm.is_finite() {
            return Err(Error::InvalidArgument("normalize mode needs a finite clip norm".into()));
        }
        Ok(Self { clip_norm, mode })
    }
}

#[derive(Clone, Debug)]
pub struct PerSampleNormReport<S> {
    /// Per-parameter norms, keyed by parameter name, each `[B]`.
    pub per_layer: BTreeMap<String, Tensor<S>>,
    /// `[B]`
    pub total: Tensor<S>,
}

pub fn clip_factors<S: Scalar>(norms: &[S], spec: &ClipSpec) -> Vec<S> {
    let c = S::cast(spec.clip_norm);
    norms
        .iter()
        .map(|&n| match spec.mode {
            ClipMode::Clip => {
                if n <= S::zero() || !spec.clip_norm.is_finite() {
                    S::one()
                } else {
                    (c / n).min(S::one())
                }
            }
            ClipMode::Normalize => c / (n + S::cast(1e-12)),
        })
        .collect()
}

fn as_btp<'a, S: Scalar>(x: &'a Tensor<S>, op: &'static str) -> Result<(usize, usize, usize, &'a [S])> {
    match x.shape() {
        [b, p] => Ok((*b, 1, *p, x.data())),
        [b, t, p] => Ok((*b, *t, *p, x.data())),
        s => Err(shape_err(op, format!("expected [B, T, p], got {s:?}"))),
    }
}

/// `Σ_{t,u} G(a)_{tu} G(b)_{tu}` for one sample, `a: [T, p]`, `b: [T, q]`.
fn gram_inner<S: Scalar>(a: &[S], b: &[S], t: usize, p: usize, q: usize) -> S {
    if t == 1 {
        return dot(a, a) * dot(b, b);
    }
    let mut acc = S::zero();
    for i in 0..t {
        let (ai, bi) = (&a[i * p..(i + 1) * p], &b[i * q..(i + 1) * q]);
        acc += dot(ai, ai) * dot(bi, bi);
        for j in 0..i {
            let ga = dot(ai, &a[j * p..(j + 1) * p]);
            let gb = dot(bi, &b[j * q..(j + 1) * q]);
            acc += S::cast(2.0) * ga * gb;
        }
    }
    acc
}

/// Squared per-sample weight-gradient norms of a linear layer.
pub fn ghost_norm_linear<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    ghost_norm_linear_metered(a, b, None)
}

pub fn ghost_norm_linear_metered<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    meter: Option<&AllocationMeter>,
) -> Result<Tensor<S>> {
    let (ba, ta, p, ad) = as_btp(a, "ghost_norm_linear")?;
    let (bb, tb, q, bd) = as_btp(b, "ghost_norm_linear")?;
    if ba != bb || ta != tb {
        return Err(shape_err(
            "ghost_norm_linear",
            format!("input {:?} vs output grad {:?}", a.shape(), b.shape()),
        ));
    }
    // two T x T Gram matrices per sample, evaluated entrywise
    let _scratch = meter.map(|m| m.charge_elems::<S>("ghost-gram", 2 * ba * ta * ta));
    let out = (0..ba)
        .map(|i| {
            gram_inner(
                &ad[i * ta * p..(i + 1) * ta * p],
                &bd[i * ta * q..(i + 1) * ta * q],
                ta,
                p,
                q,
            )
        })
        .collect();
    Ok(Tensor::from_parts(vec![ba], out))
}

/// Squared per-sample bias-gradient norms `∥Σ_t b_t∥²`.
pub fn bias_sq_norms<S: Scalar>(b: &Tensor<S>) -> Result<Tensor<S>> {
    let (bs, t, q, bd) = as_btp(b, "bias_sq_norms")?;
    let out = (0..bs)
        .map(|i| {
            let mut acc = S::zero();
            for k in 0..q {
                let s = (0..t).fold(S::zero(), |a, u| a + bd[(i * t + u) * q + k]);
                acc += s * s;
            }
            acc
        })
        .collect();
    Ok(Tensor::from_parts(vec![bs], out))
}

/// Squared per-sample norms of a gather layer's table gradient:
/// `Σ_{t,u} 1[idx_t = idx_u] ⟨g_t, g_u⟩`, with `None` rows ignored.
pub fn gather_sq_norms<S: Scalar>(indices: &[Option<usize>], grad: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, t, d, g) = as_btp(grad, "gather_sq_norms")?;
    if indices.len() != b * t {
        return Err(shape_err(
            "gather_sq_norms",
            format!("{} indices for {:?}", indices.len(), grad.shape()),
        ));
    }
    let out = (0..b)
        .map(|i| {
            let idx = &indices[i * t..(i + 1) * t];
            let mut acc = S::zero();
            for u in 0..t {
                let Some(iu) = idx[u] else { continue };
                let gu = &g[(i * t + u) * d..(i * t + u + 1) * d];
                acc += dot(gu, gu);
                for v in 0..u {
                    if idx[v] == Some(iu) {
                        acc += S::cast(2.0) * dot(gu, &g[(i * t + v) * d..(i * t + v + 1) * d]);
                    }
                }
            }
            acc
        })
        .collect();
    Ok(Tensor::from_parts(vec![b], out))
}

/// Squared per-sample norms of layer-norm gain and bias gradients from the
/// normalized input `x̂` and output gradient.
pub fn layer_norm_sq_norms<S: Scalar>(xhat: &Tensor<S>, grad: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let (b, t, d, x) = as_btp(xhat, "layer_norm_sq_norms")?;
    let (b2, t2, d2, g) = as_btp(grad, "layer_norm_sq_norms")?;
    if (b, t, d) != (b2, t2, d2) {
        return Err(shape_err(
            "layer_norm_sq_norms",
            format!("{:?} vs {:?}", xhat.shape(), grad.shape()),
        ));
    }
    let mut gain = Vec::with_capacity(b);
    let mut bias = Vec::with_capacity(b);
    for i in 0..b {
        let (mut sg, mut sb) = (S::zero(), S::zero());
        for k in 0..d {
            let (mut pg, mut pb) = (S::zero(), S::zero());
            for u in 0..t {
                let r = (i * t + u) * d + k;
                pg += x[r] * g[r];
                pb += g[r];
            }
            sg += pg * pg;
            sb += pb * pb;
        }
        gain.push(sg);
        bias.push(sb);
    }
    Ok((Tensor::from_parts(vec![b], gain), Tensor::from_parts(vec![b], bias)))
}

fn finish_radicand<S: Scalar>(sample: usize, terms: [S; 3]) -> Result<S> {
    let [t1, t2, cross] = terms;
    let r = t1 + t2 + S::cast(2.0) * cross;
    let mag = t1.abs() + t2.abs() + S::cast(2.0) * cross.abs();
    let tol = S::cast(1e-9) + S::cast(8.0) * S::epsilon() * mag;
    if r < -tol {
        return Err(Error::NegativeRadicand {
            sample,
            radicand: r.as_f64(),
        });
    }
    Ok(r.max(S::zero()))
}

/// Input-path term `⟨A_i, B_i⟩` with `A_i` the token-equality mask and
/// `B_i = ∇e_S ∇e_Sᵀ`, materialized as `[B, L, L]` buffers.
fn input_path_terms<S: Scalar>(
    tokens: &[Option<usize>],
    grad_s: &[S],
    b: usize,
    l: usize,
    d: usize,
    meter: Option<&AllocationMeter>,
) -> Vec<S> {
    let _a = meter.map(|m| m.charge_elems::<S>("phantom-token-mask", b * l * l));
    let _g = meter.map(|m| m.charge_elems::<S>("phantom-input-gram", b * l * l));
    let mut mask = vec![S::zero(); b * l * l];
    let mut gram = vec![S::zero(); b * l * l];
    for i in 0..b {
        for u in 0..l {
            for v in 0..l {
                let (tu, tv) = (tokens[i * l + u], tokens[i * l + v]);
                if tu.is_some() && tu == tv {
                    mask[(i * l + u) * l + v] = S::one();
                }
                gram[(i * l + u) * l + v] = dot(
                    &grad_s[(i * l + u) * d..(i * l + u + 1) * d],
                    &grad_s[(i * l + v) * d..(i * l + v + 1) * d],
                );
            }
        }
    }
    (0..b)
        .map(|i| dot(&mask[i * l * l..(i + 1) * l * l], &gram[i * l * l..(i + 1) * l * l]))
        .collect()
}

/// Squared per-sample norms of the tied-embedding gradient.
///
/// `tokens: [B * L]` are the input-gather indices, `grad_s: [B, L, d]` the
/// gradient at the gathered rows, and the output path scored `h: [B, T, d]`
/// against the table with score gradient `delta: [B, T, M]`. The output-path
/// gradient `δᵀ h` is never formed: its norm is `⟨h hᵀ, δ δᵀ⟩` and the cross
/// term reduces to `Σ_t ⟨∇e_S,t, c_t⟩` with `c_t = Σ_u δ_u[s_t] h_u`.
pub fn phantom_sq_norms_factored<S: Scalar>(
    tokens: &[Option<usize>],
    grad_s: &Tensor<S>,
    h: &Tensor<S>,
    delta: &Tensor<S>,
    meter: Option<&AllocationMeter>,
) -> Result<Tensor<S>> {
    let (b, l, d, gs) = as_btp(grad_s, "phantom")?;
    let (bh, t, dh, hv) = as_btp(h, "phantom")?;
    let (bd, td, m, dv) = as_btp(delta, "phantom")?;
    if tokens.len() != b * l || bh != b || bd != b || dh != d || td != t {
        return Err(shape_err(
            "phantom",
            format!(
                "{} tokens, grad_s {:?}, h {:?}, delta {:?}",
                tokens.len(),
                grad_s.shape(),
                h.shape(),
                delta.shape()
            ),
        ));
    }
    if let Some(bad) = tokens.iter().flatten().find(|&&s| s >= m) {
        return Err(Error::IndexOutOfRange { index: *bad, size: m });
    }
    let first = input_path_terms(tokens, gs, b, l, d, meter);
    let second = ghost_norm_linear_metered(h, delta, meter)?;
    let _c = meter.map(|mt| mt.charge_elems::<S>("phantom-cross", b * l * d));
    let mut c = vec![S::zero(); b * l * d];
    for i in 0..b {
        for s in 0..l {
            let Some(tok) = tokens[i * l + s] else { continue };
            let row = &mut c[(i * l + s) * d..(i * l + s + 1) * d];
            for u in 0..t {
                let w = dv[(i * t + u) * m + tok];
                for (r, &x) in row.iter_mut().zip(&hv[(i * t + u) * d..(i * t + u + 1) * d]) {
                    *r += w * x;
                }
            }
        }
    }
    let out = (0..b)
        .map(|i| {
            let cross = dot(&gs[i * l * d..(i + 1) * l * d], &c[i * l * d..(i + 1) * l * d]);
            finish_radicand(i, [first[i], second.data()[i], cross])
        })
        .collect::<Result<Vec<S>>>()?;
    Ok(Tensor::from_parts(vec![b], out))
}

/// Same quantity from an explicit output-path gradient `grad_c: [B, M, d]`.
pub fn phantom_sq_norms_literal<S: Scalar>(
    tokens: &[Option<usize>],
    grad_s: &Tensor<S>,
    grad_c: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (b, l, d, gs) = as_btp(grad_s, "phantom_literal")?;
    let (bc, m, dc, gc) = as_btp(grad_c, "phantom_literal")?;
    if tokens.len() != b * l || bc != b || dc != d {
        return Err(shape_err(
            "phantom_literal",
            format!("grad_s {:?} grad_c {:?}", grad_s.shape(), grad_c.shape()),
        ));
    }
    if let Some(bad) = tokens.iter().flatten().find(|&&s| s >= m) {
        return Err(Error::IndexOutOfRange { index: *bad, size: m });
    }
    let first = input_path_terms(tokens, gs, b, l, d, None);
    let out = (0..b)
        .map(|i| {
            let gci = &gc[i * m * d..(i + 1) * m * d];
            let second = dot(gci, gci);
            let mut cross = S::zero();
            for s in 0..l {
                if let Some(tok) = tokens[i * l + s] {
                    cross += dot(&gs[(i * l + s) * d..(i * l + s + 1) * d], &gci[tok * d..(tok + 1) * d]);
                }
            }
            finish_radicand(i, [first[i], second, cross])
        })
        .collect::<Result<Vec<S>>>()?;
    Ok(Tensor::from_parts(vec![b], out))
}

/// Norms (not squared) of the tied-embedding gradient; see
/// [`phantom_sq_norms_literal`].
pub fn phantom_norm_embedding<S: Scalar>(
    tokens: &[Option<usize>],
    grad_s: &Tensor<S>,
    grad_c: &Tensor<S>,
) -> Result<Tensor<S>> {
    Ok(phantom_sq_norms_literal(tokens, grad_s, grad_c)?.map(|v| v.sqrt()))
}

fn dense<'a, S: Scalar>(g: &'a Graph<'_, S>, c: &Capture<S>) -> Result<&'a Tensor<S>> {
    match g.capture_input(c) {
        CaptureInput::Dense(t) => Ok(t),
        CaptureInput::Indices(_) => Err(Error::InvalidArgument("expected a dense capture".into())),
    }
}

fn indices<'a, S: Scalar>(g: &'a Graph<'_, S>, c: &Capture<S>) -> Result<&'a [Option<usize>]> {
    match g.capture_input(c) {
        CaptureInput::Indices(i) => Ok(i),
        CaptureInput::Dense(_) => Err(Error::InvalidArgument("expected a gather capture".into())),
    }
}

/// Per-parameter and total per-sample norms from a backward pass seeded with
/// unit weights (so captured output gradients are per-sample gradients).
pub fn per_sample_norms<S: Scalar>(
    g: &Graph<'_, S>,
    bw: &Backward<S>,
    meter: Option<&AllocationMeter>,
) -> Result<PerSampleNormReport<S>> {
    let params: &ParamStore<S> = g.params();
    let by_param = bw.captures_by_param();
    let mut sq: BTreeMap<ParamId, Tensor<S>> = BTreeMap::new();
    let mut batch = None;
    for (&pid, caps) in &by_param {
        let name = params.name(pid);
        let norms = match caps.as_slice() {
            [c] => match c.kind {
                // for x Wᵀ the gradient is bᵀ a, which has the same norm
                CaptureKind::Linear { weight, .. } if weight == pid => {
                    ghost_norm_linear_metered(dense(g, c)?, &c.output_grad, meter)?
                }
                CaptureKind::Linear { .. } => bias_sq_norms(&c.output_grad)?,
                CaptureKind::Gather { .. } => gather_sq_norms(indices(g, c)?, &c.output_grad)?,
                CaptureKind::LayerNorm { gain, .. } => {
                    let (gn, bn) = layer_norm_sq_norms(dense(g, c)?, &c.output_grad)?;
                    if gain == pid {
                        gn
                    } else {
                        bn
                    }
                }
            },
            [x, y] => {
                let (gat, lin) = match (&x.kind, &y.kind) {
                    (
                        CaptureKind::Gather { .. },
                        CaptureKind::Linear {
                            transposed: true,
                            bias: None,
                            ..
                        },
                    ) => (x, y),
                    (
                        CaptureKind::Linear {
                            transposed: true,
                            bias: None,
                            ..
                        },
                        CaptureKind::Gather { .. },
                    ) => (y, x),
                    _ => {
                        return Err(Error::UnsupportedSharing {
                            param: name.to_string(),
                            detail: "only a gather plus a transposed scoring layer may share a table".into(),
                        })
                    }
                };
                phantom_sq_norms_factored(
                    indices(g, gat)?,
                    &gat.output_grad,
                    dense(g, lin)?,
                    &lin.output_grad,
                    meter,
                )?
            }
            _ => {
                return Err(Error::UnsupportedSharing {
                    param: name.to_string(),
                    detail: format!("{} traversals", caps.len()),
                })
            }
        };
        if let Some(b) = batch {
            if norms.numel() != b {
                return Err(shape_err(
                    "per_sample_norms",
                    format!("{name}: batch {} vs {b}", norms.numel()),
                ));
            }
        }
        batch = Some(norms.numel());
        sq.insert(pid, norms);
    }
    for id in params.ids() {
        if bw.grad(id).is_some() && !sq.contains_key(&id) {
            return Err(Error::MissingCapture(params.name(id).to_string()));
        }
    }
    let b = batch.ok_or_else(|| Error::MissingCapture("no parameterized layers".into()))?;
    let mut total = vec![S::zero(); b];
    let mut per_layer = BTreeMap::new();
    for (pid, t) in sq {
        for (acc, &v) in total.iter_mut().zip(t.data()) {
            *acc += v;
        }
        per_layer.insert(params.name(pid).to_string(), t.map(|v| v.sqrt()));
    }
    Ok(PerSampleNormReport {
        per_layer,
        total: Tensor::from_parts(vec![b], total.into_iter().map(|v| v.sqrt()).collect()),
    })
}

/// Ghost-path norms for a model batch (no dropout, no correction).
pub fn model_per_sample_norms<S: Scalar>(
    model: &Model<S>,
    batch: &Batch,
    meter: Option<&AllocationMeter>,
) -> Result<PerSampleNormReport<S>> {
    let mut g = Graph::new(&model.params);
    let out = model.forward(&mut g, batch, Default::default())?;
    let bw = g.backward(out.loss, &vec![S::one(); batch.batch])?;
    per_sample_norms(&g, &bw, meter)
}

#[derive(Clone, Debug)]
pub struct NaiveOracle<S> {
    /// `grads[i][p]`: gradient of sample `i` w.r.t. parameter `p`.
    pub grads: Vec<Vec<Tensor<S>>>,
    /// `[B]`
    pub norms: Tensor<S>,
}

/// Runs one backward pass per sample and keeps every per-sample gradient.
/// `build(g, i)` must record sample `i`'s scalar loss and return its node.
pub fn naive_per_sample_with<'a, S: Scalar>(
    params: &'a ParamStore<S>,
    batch: usize,
    max_bytes: usize,
    meter: Option<&AllocationMeter>,
    mut build: impl FnMut(&mut Graph<'a, S>, usize) -> Result<NodeId>,
) -> Result<NaiveOracle<S>> {
    let bytes = batch * params.num_scalars() * std::mem::size_of::<S>();
    if bytes > max_bytes {
        return Err(Error::OracleTooLarge {
            bytes,
            bound: max_bytes,
        });
    }
    let _charge = meter.map(|m| m.charge(PER_SAMPLE_GRAD, bytes));
    let mut grads = Vec::with_capacity(batch);
    let mut norms = Vec::with_capacity(batch);
    for i in 0..batch {
        let mut g = Graph::new(params);
        let loss = build(&mut g, i)?;
        let n = g.value(loss).numel();
        let bw = g.backward(loss, &vec![S::one(); n])?;
        let gi: Vec<Tensor<S>> = params.ids().map(|id| bw.grad_or_zeros(params, id)).collect();
        let sq = gi.iter().fold(S::zero(), |a, t| a + t.sum_sq());
        norms.push(sq.sqrt());
        grads.push(gi);
    }
    Ok(NaiveOracle {
        grads,
        norms: Tensor::from_parts(vec![batch], norms),
    })
}

pub const DEFAULT_ORACLE_BYTES: usize = 1 << 30;

pub fn naive_per_sample_oracle<S: Scalar>(
    model: &Model<S>,
    batch: &Batch,
    max_bytes: usize,
    meter: Option<&AllocationMeter>,
) -> Result<NaiveOracle<S>> {
    naive_per_sample_with(&model.params, batch.batch, max_bytes, meter, |g, i| {
        Ok(model.forward(g, &batch.sample(i), Default::default())?.loss)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_factor_cases() {
        let c = ClipSpec::new(1.0, ClipMode::Clip).unwrap();
        assert_eq!(clip_factors(&[2.0f64, 0.5, 0.0], &c), vec![0.5, 1.0, 1.0]);
        let n = ClipSpec::new(1.0, ClipMode::Normalize).unwrap();
        assert!((clip_factors(&[3.0f64], &n)[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!(ClipSpec::new(0.0, ClipMode::Clip).is_err());
    }

    #[test]
    fn rank_one_ghost() {
        let a = Tensor::<f64>::from_f64(&[1, 1, 2], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 1, 1], &[3.0]).unwrap();
        assert_eq!(ghost_norm_linear(&a, &b).unwrap().data(), &[45.0]);
        let z = Tensor::<f64>::zeros(&[1, 1, 1]);
        assert_eq!(ghost_norm_linear(&a, &z).unwrap().data(), &[0.0]);
    }

    #[test]
    fn one_row_phantom() {
        // L = 1, token 2, ∇e_S = u, ∇e_C zero except row 2 = v
        let u = [0.5, -1.0, 2.0];
        let v = [1.5, 0.25, -0.5];
        let gs = Tensor::<f64>::from_f64(&[1, 1, 3], &u).unwrap();
        let mut gc = vec![0.0; 4 * 3];
        gc[6..9].copy_from_slice(&v);
        let gc = Tensor::<f64>::from_f64(&[1, 4, 3], &gc).unwrap();
        let n = phantom_norm_embedding(&[Some(2)], &gs, &gc).unwrap();
        let want: f64 = u.iter().zip(&v).map(|(a, b)| (a + b) * (a + b)).sum::<f64>().sqrt();
        assert!((n.data()[0] - want).abs() < 1e-12);
        let zero = phantom_norm_embedding(
            &[Some(2)],
            &Tensor::<f64>::zeros(&[1, 1, 3]),
            &Tensor::zeros(&[1, 4, 3]),
        )
        .unwrap();
        assert_eq!(zero.data(), &[0.0]);
    }

    #[test]
    fn negative_radicand_is_an_error() {
        assert!(finish_radicand(0, [1.0f64, 1.0, -2.0]).is_err());
        assert_eq!(finish_radicand(0, [0.0f64, 0.0, -1e-10]).unwrap(), 0.0);
    }
}
