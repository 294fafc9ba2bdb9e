//! Mean/variance propagation through network layers under a diagonal
//! Gaussian (mean-field) approximation.
//!
//! Every coordinate is treated as an independent Gaussian described by its
//! mean `c` and variance `d`. Linear maps use the exact product-variance
//! identity for independent factors; ReLU uses the exact rectified-Gaussian
//! moments, and GELU reuses the ReLU formulas except at zero variance.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats<S> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

impl<S: Scalar> GaussianStats<S> {
    pub fn new(mean: Tensor<S>, var: Tensor<S>) -> Result<Self> {
        if mean.shape() != var.shape() {
            return Err(shape_err(
                "GaussianStats",
                format!("mean {:?} var {:?}", mean.shape(), var.shape()),
            ));
        }
        if var.data().iter().any(|v| *v < S::zero()) {
            return Err(Error::InvalidArgument("negative variance".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn deterministic(mean: Tensor<S>) -> Self {
        let var = Tensor::zeros(mean.shape());
        Self { mean, var }
    }

    /// Same variance `var` on every coordinate.
    pub fn uniform(mean: Tensor<S>, var: S) -> Result<Self> {
        let v = Tensor::full(mean.shape(), var);
        Self::new(mean, v)
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    fn check(&self) -> Result<()> {
        if self.var.data().iter().any(|v| *v < S::zero()) {
            return Err(Error::InvalidArgument("negative variance".into()));
        }
        Ok(())
    }
}

/// `X W + b` for independent `X: [.., p]`, `W: [p, q]`, `b: [q]`.
///
/// Per output coordinate the variance is
/// `Σ_k σx²σw² + σx²μw² + σw²μx²` plus the bias variance.
pub fn propagate_linear<S: Scalar>(
    x: &GaussianStats<S>,
    w: &GaussianStats<S>,
    bias: Option<&GaussianStats<S>>,
) -> Result<GaussianStats<S>> {
    x.check()?;
    w.check()?;
    if w.mean.rank() != 2 || x.mean.last_dim() != w.mean.shape()[0] {
        return Err(shape_err(
            "propagate_linear",
            format!("x {:?} w {:?}", x.shape(), w.shape()),
        ));
    }
    let (p, q) = (w.mean.shape()[0], w.mean.shape()[1]);
    let rows = x.mean.rows();
    let mut mean = vec![S::zero(); rows * q];
    let mut var = vec![S::zero(); rows * q];
    if let Some(b) = bias {
        b.check()?;
        if b.mean.numel() != q {
            return Err(shape_err("propagate_linear", format!("bias {:?}", b.shape())));
        }
        for r in 0..rows {
            mean[r * q..(r + 1) * q].copy_from_slice(b.mean.data());
            var[r * q..(r + 1) * q].copy_from_slice(b.var.data());
        }
    }
    gemm(x.mean.data(), w.mean.data(), &mut mean, rows, p, q, false, false);
    // σx² (σw² + μw²)
    let w_second: Vec<S> = w
        .mean
        .data()
        .iter()
        .zip(w.var.data())
        .map(|(&m, &v)| v + m * m)
        .collect();
    gemm(x.var.data(), &w_second, &mut var, rows, p, q, false, false);
    // σw² μx²
    let x_mean_sq: Vec<S> = x.mean.data().iter().map(|&m| m * m).collect();
    gemm(&x_mean_sq, w.var.data(), &mut var, rows, p, q, false, false);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = q;
    Ok(GaussianStats {
        mean: Tensor::from_parts(shape.clone(), mean),
        var: Tensor::from_parts(shape, var),
    })
}

/// Elementwise product of independent variables.
pub fn propagate_product<S: Scalar>(x: &GaussianStats<S>, y: &GaussianStats<S>) -> Result<GaussianStats<S>> {
    let mean = x.mean.zip_map(&y.mean, |a, b| a * b)?;
    let mut var = Vec::with_capacity(mean.numel());
    for k in 0..mean.numel() {
        let (mx, vx) = (x.mean.data()[k], x.var.data()[k]);
        let (my, vy) = (y.mean.data()[k], y.var.data()[k]);
        var.push(vx * vy + vx * my * my + vy * mx * mx);
    }
    Ok(GaussianStats {
        var: Tensor::from_parts(mean.shape().to_vec(), var),
        mean,
    })
}

/// Sum of independent variables: means and variances add.
pub fn propagate_add<S: Scalar>(a: &GaussianStats<S>, b: &GaussianStats<S>) -> Result<GaussianStats<S>> {
    Ok(GaussianStats {
        mean: a.mean.add(&b.mean)?,
        var: a.var.add(&b.var)?,
    })
}

/// `(E[Z], E[Z²])` for `Z = max(X, 0)`, `X ~ N(c, d)`.
pub fn relu_moments<S: Scalar>(c: S, d: S) -> (S, S) {
    if d <= S::zero() {
        let z = c.max(S::zero());
        return (z, z * z);
    }
    let s = d.sqrt();
    let a = c / s;
    let cdf = a.norm_cdf();
    let pdf = a.norm_pdf();
    let first = c * cdf + s * pdf;
    let second = cdf * (c * c + d) + c * s * pdf;
    (first, second)
}

fn map_stats<S: Scalar>(x: &GaussianStats<S>, f: impl Fn(S, S) -> (S, S)) -> Result<GaussianStats<S>> {
    x.check()?;
    let mut mean = Vec::with_capacity(x.mean.numel());
    let mut var = Vec::with_capacity(x.mean.numel());
    for (&c, &d) in x.mean.data().iter().zip(x.var.data()) {
        let (m, v) = f(c, d);
        mean.push(m);
        var.push(v);
    }
    let shape = x.shape().to_vec();
    Ok(GaussianStats {
        mean: Tensor::from_parts(shape.clone(), mean),
        var: Tensor::from_parts(shape, var),
    })
}

/// Exact moments of `ReLU(X)`; variance is `E[Z²] - E[Z]²`.
pub fn propagate_relu<S: Scalar>(x: &GaussianStats<S>) -> Result<GaussianStats<S>> {
    map_stats(x, |c, d| {
        let (m1, m2) = relu_moments(c, d);
        (m1, (m2 - m1 * m1).max(S::zero()))
    })
}

/// GELU approximated by the ReLU moments; zero-variance inputs map through
/// the exact GELU.
pub fn propagate_gelu<S: Scalar>(x: &GaussianStats<S>) -> Result<GaussianStats<S>> {
    map_stats(x, |c, d| {
        if d <= S::zero() {
            (c * c.norm_cdf(), S::zero())
        } else {
            let (m1, m2) = relu_moments(c, d);
            (m1, (m2 - m1 * m1).max(S::zero()))
        }
    })
}

/// `(E[Z], E[Z²])` for `Z = max(X1, X2)` with independent
/// `X1 ~ N(mu1, var1)`, `X2 ~ N(mu2, var2)`.
pub fn max_gaussian_moments<S: Scalar>(mu1: S, var1: S, mu2: S, var2: S) -> Result<(S, S)> {
    if var1 < S::zero() || var2 < S::zero() {
        return Err(Error::InvalidArgument("negative variance".into()));
    }
    let nu = (var1 + var2).sqrt();
    if nu == S::zero() {
        let z = mu1.max(mu2);
        return Ok((z, z * z));
    }
    let g = (mu1 - mu2) / nu;
    let (cp, cn, pdf) = (g.norm_cdf(), (-g).norm_cdf(), g.norm_pdf());
    let first = mu1 * cp + mu2 * cn + nu * pdf;
    let second = (mu1 * mu1 + var1) * cp + (mu2 * mu2 + var2) * cn + (mu1 + mu2) * nu * pdf;
    Ok((first, second))
}

/// Layer normalization with realized statistics: the normalizer is computed
/// from the mean activations and treated as a constant, so input variance is
/// scaled by `1 / std²` before the (noisy) affine gain and bias.
pub fn propagate_layer_norm<S: Scalar>(
    x: &GaussianStats<S>,
    gain: &GaussianStats<S>,
    bias: &GaussianStats<S>,
    eps: S,
) -> Result<GaussianStats<S>> {
    x.check()?;
    let d = x.mean.last_dim();
    if gain.mean.numel() != d || bias.mean.numel() != d {
        return Err(shape_err("propagate_layer_norm", format!("width {d}")));
    }
    let rows = x.mean.rows();
    let inv_d = S::one() / S::cast(d as f64);
    let mut mean = vec![S::zero(); rows * d];
    let mut var = vec![S::zero(); rows * d];
    for r in 0..rows {
        let row = x.mean.row(r);
        let mu = row.iter().fold(S::zero(), |a, &v| a + v) * inv_d;
        let sd2 = row.iter().fold(S::zero(), |a, &v| a + (v - mu) * (v - mu)) * inv_d + eps;
        let inv_sd = S::one() / sd2.sqrt();
        for k in 0..d {
            let h = (row[k] - mu) * inv_sd;
            let hv = x.var.data()[r * d + k] / sd2;
            let (gm, gv) = (gain.mean.data()[k], gain.var.data()[k]);
            mean[r * d + k] = gm * h + bias.mean.data()[k];
            var[r * d + k] = hv * gv + hv * gm * gm + gv * h * h + bias.var.data()[k];
        }
    }
    let shape = x.shape().to_vec();
    Ok(GaussianStats {
        mean: Tensor::from_parts(shape.clone(), mean),
        var: Tensor::from_parts(shape, var),
    })
}

/// Dropout with keep-probability `1 - rate` and inverted scaling.
pub fn propagate_dropout<S: Scalar>(x: &GaussianStats<S>, rate: S) -> Result<GaussianStats<S>> {
    if rate <= S::zero() {
        return Ok(x.clone());
    }
    let keep = S::one() - rate;
    map_stats(x, |c, d| (c, rate / keep * c * c + d / keep))
}

/// One layer of a sequential propagation chain.
pub enum StatLayer<'a, S> {
    Linear {
        weight: &'a GaussianStats<S>,
        bias: Option<&'a GaussianStats<S>>,
    },
    Relu,
    Gelu,
    LayerNorm {
        gain: &'a GaussianStats<S>,
        bias: &'a GaussianStats<S>,
        eps: S,
    },
    Dropout(S),
}

/// Pushes `input` through `layers` in order.
pub fn propagate_block<S: Scalar>(input: &GaussianStats<S>, layers: &[StatLayer<'_, S>]) -> Result<GaussianStats<S>> {
    let mut cur = input.clone();
    for layer in layers {
        cur = match layer {
            StatLayer::Linear { weight, bias } => propagate_linear(&cur, weight, *bias)?,
            StatLayer::Relu => propagate_relu(&cur)?,
            StatLayer::Gelu => propagate_gelu(&cur)?,
            StatLayer::LayerNorm { gain, bias, eps } => propagate_layer_norm(&cur, gain, bias, *eps)?,
            StatLayer::Dropout(rate) => propagate_dropout(&cur, *rate)?,
        };
    }
    Ok(cur)
}

/// Convex mixing `out_i = Σ_j w_ij v_j` with fixed weights over independent
/// rows: `w: [.., L, L]`, `v: [.., L, dh]`.
pub fn propagate_attention_mix<S: Scalar>(v: &GaussianStats<S>, weights: &Tensor<S>) -> Result<GaussianStats<S>> {
    let r = v.mean.rank();
    if r < 2 || weights.rank() != r || weights.shape()[..r - 1] != v.shape()[..r - 1] {
        return Err(shape_err(
            "propagate_attention_mix",
            format!("v {:?} w {:?}", v.shape(), weights.shape()),
        ));
    }
    let l = v.shape()[r - 2];
    let dh = v.shape()[r - 1];
    let groups = v.mean.numel() / (l * dh);
    let mut mean = vec![S::zero(); v.mean.numel()];
    let mut var = vec![S::zero(); v.mean.numel()];
    let w_sq: Vec<S> = weights.data().iter().map(|&w| w * w).collect();
    for g in 0..groups {
        let ws = &weights.data()[g * l * l..(g + 1) * l * l];
        let ws2 = &w_sq[g * l * l..(g + 1) * l * l];
        let vm = &v.mean.data()[g * l * dh..(g + 1) * l * dh];
        let vv = &v.var.data()[g * l * dh..(g + 1) * l * dh];
        gemm(ws, vm, &mut mean[g * l * dh..(g + 1) * l * dh], l, l, dh, false, false);
        gemm(ws2, vv, &mut var[g * l * dh..(g + 1) * l * dh], l, l, dh, false, false);
    }
    let shape = v.shape().to_vec();
    Ok(GaussianStats {
        mean: Tensor::from_parts(shape.clone(), mean),
        var: Tensor::from_parts(shape, var),
    })
}

/// Reduces per-coordinate key variances `[B, L, h * dh]` to one isotropic
/// variance per key and head, `[B, h, L]`.
pub fn scalarize_key_variance<S: Scalar>(keys: &GaussianStats<S>, heads: usize) -> Result<Tensor<S>> {
    let s = keys.shape();
    if s.len() != 3 || !s[2].is_multiple_of(heads) {
        return Err(shape_err("scalarize_key_variance", format!("{s:?} / {heads}")));
    }
    let (b, l, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let inv = S::one() / S::cast(dh as f64);
    let mut out = vec![S::zero(); b * heads * l];
    for bi in 0..b {
        for t in 0..l {
            let row = keys.var.row(bi * l + t);
            for h in 0..heads {
                let m = row[h * dh..(h + 1) * dh].iter().fold(S::zero(), |a, &v| a + v) * inv;
                out[(bi * heads + h) * l + t] = m;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, heads, l], out))
}
