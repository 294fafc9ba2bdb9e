//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records operations eagerly: every node's value is computed
//! when the node is pushed, so nodes are topologically ordered by
//! construction. [`Graph::backward`] replays the tape in reverse, seeded with
//! per-sample loss weights, and returns parameter gradients together with a
//! [`Capture`] for every traversal of a parameterized layer (linear, gather,
//! layer-norm). A capture pairs the layer's per-sample input, which the graph
//! already stores, with the per-sample gradient w.r.t. the layer's output.
//!
//! Batch independence is assumed throughout: no primitive mixes rows of
//! different samples, so the output gradient of sample `i` is `w_i` times the
//! gradient of `L_i` alone.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Named parameter tensors. Ids are dense indices in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Mutable access to every tensor, in id order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.values.iter_mut().collect()
    }
}

/// What a capture records about the layer traversal it came from.
#[derive(Clone, Debug, PartialEq)]
pub enum CaptureKind {
    /// `y = x W + b`, or `y = x Wᵀ + b` when `transposed`.
    Linear {
        weight: ParamId,
        bias: Option<ParamId>,
        transposed: bool,
    },
    /// Row lookup `y_t = table[idx_t]`; `None` indices produce zero rows.
    Gather { table: ParamId },
    /// `y = gain * x̂ + bias` over the last axis.
    LayerNorm { gain: ParamId, bias: ParamId },
}

/// Per-sample output gradient of one parameterized layer traversal.
///
/// `output_grad` has shape `[B, T, q]` (a 2-D `[B, q]` output is stored as
/// `T = 1`). The matching input lives in the graph; see
/// [`Graph::capture_input`].
#[derive(Clone, Debug)]
pub struct Capture<S> {
    pub node: NodeId,
    pub kind: CaptureKind,
    pub output_grad: Tensor<S>,
}

/// Layer input as seen by a capture.
pub enum CaptureInput<'g, S> {
    /// Dense `[B, T, p]` activations (for layer-norm: the normalized `x̂`).
    Dense(&'g Tensor<S>),
    /// Gather indices, flattened `[B * T]`.
    Indices(&'g [Option<usize>]),
}

#[derive(Debug)]
pub struct Backward<S> {
    param_grads: Vec<Option<Tensor<S>>>,
    pub captures: Vec<Capture<S>>,
}

impl<S: Scalar> Backward<S> {
    /// Gradient of a parameter, `None` when the parameter was not used.
    pub fn grad(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.param_grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter, zeros when unused.
    pub fn grad_or_zeros(&self, params: &ParamStore<S>, id: ParamId) -> Tensor<S> {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
    }

    pub fn into_param_grads(self) -> Vec<Option<Tensor<S>>> {
        self.param_grads
    }

    /// Captures grouped by the parameter they belong to, in tape order.
    pub fn captures_by_param(&self) -> BTreeMap<ParamId, Vec<&Capture<S>>> {
        let mut out: BTreeMap<ParamId, Vec<&Capture<S>>> = BTreeMap::new();
        for c in &self.captures {
            match c.kind {
                CaptureKind::Linear { weight, bias, .. } => {
                    out.entry(weight).or_default().push(c);
                    if let Some(b) = bias {
                        out.entry(b).or_default().push(c);
                    }
                }
                CaptureKind::Gather { table } => out.entry(table).or_default().push(c),
                CaptureKind::LayerNorm { gain, bias } => {
                    out.entry(gain).or_default().push(c);
                    out.entry(bias).or_default().push(c);
                }
            }
        }
        out
    }
}

/// Attention visibility: `allowed[(b * L + i) * L + j]` lets query `i` see key `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub batch: usize,
    pub len: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    /// Causal mask where padded keys are hidden except from themselves.
    pub fn causal(batch: usize, len: usize, is_pad: &[bool]) -> Self {
        let mut allowed = vec![false; batch * len * len];
        for b in 0..batch {
            for i in 0..len {
                for j in 0..=i {
                    let pad = is_pad.get(b * len + j).copied().unwrap_or(false);
                    allowed[(b * len + i) * len + j] = !pad || i == j;
                }
            }
        }
        Self { batch, len, allowed }
    }

    pub fn full(batch: usize, len: usize) -> Self {
        Self {
            batch,
            len,
            allowed: vec![true; batch * len * len],
        }
    }

    #[inline]
    fn get(&self, b: usize, i: usize, j: usize) -> bool {
        self.allowed[(b * self.len + i) * self.len + j]
    }
}

#[derive(Debug)]
enum Op<S> {
    Input,
    Param(ParamId),
    Linear {
        x: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        transposed: bool,
    },
    Gather {
        table: ParamId,
        indices: Vec<Option<usize>>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst {
        x: NodeId,
        c: Tensor<S>,
    },
    Scale(NodeId, S),
    Relu(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: ParamId,
        bias: ParamId,
        xhat: Tensor<S>,
        inv_std: Vec<S>,
    },
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    SplitHeads {
        x: NodeId,
        heads: usize,
    },
    MergeHeads {
        x: NodeId,
        heads: usize,
    },
    VarianceShift {
        q: NodeId,
        var: Tensor<S>,
        factor: S,
    },
    Softmax {
        x: NodeId,
    },
    SelectPosition {
        x: NodeId,
        pos: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor<S>,
    },
    SumToBatch(NodeId),
}

#[derive(Debug)]
struct Node<S> {
    op: Op<S>,
    value: Option<Tensor<S>>,
    requires_grad: bool,
}

/// Recorded computation over a borrowed parameter store.
pub struct Graph<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    checked: bool,
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            checked: true,
        }
    }

    /// Disables the per-node finiteness check.
    pub fn unchecked(mut self) -> Self {
        self.checked = false;
        self
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            _ => unreachable!("every non-param node stores its value"),
        }
    }

    /// Input (or layer-norm `x̂`) matching a capture.
    pub fn capture_input(&self, cap: &Capture<S>) -> CaptureInput<'_, S> {
        match &self.nodes[cap.node.0].op {
            Op::Linear { x, .. } => CaptureInput::Dense(self.value(*x)),
            Op::Gather { indices, .. } => CaptureInput::Indices(indices),
            Op::LayerNorm { xhat, .. } => CaptureInput::Dense(xhat),
            _ => unreachable!("captures only point at parameterized layers"),
        }
    }

    fn push(&mut self, op: Op<S>, value: Option<Tensor<S>>, requires_grad: bool) -> Result<NodeId> {
        if self.checked {
            if let Some(v) = &value {
                v.check_finite("graph node")?;
            }
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn input(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Input, Some(t), false)
            .expect("inputs are checked at construction")
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// `x W + b` with `W: [p, q]`, or `x Wᵀ + b` with `W: [q, p]` when `transposed`.
    pub fn linear(&mut self, x: NodeId, weight: ParamId, bias: Option<ParamId>, transposed: bool) -> Result<NodeId> {
        let xv = self.value(x);
        let w = self.params.get(weight);
        if w.rank() != 2 {
            return Err(shape_err("linear", format!("weight {:?}", w.shape())));
        }
        let (p, q) = if transposed {
            (w.shape()[1], w.shape()[0])
        } else {
            (w.shape()[0], w.shape()[1])
        };
        if xv.last_dim() != p {
            return Err(shape_err(
                "linear",
                format!("input {:?} vs weight {:?}", xv.shape(), w.shape()),
            ));
        }
        let rows = xv.rows();
        let mut out = vec![S::zero(); rows * q];
        if let Some(b) = bias {
            let bv = self.params.get(b);
            if bv.numel() != q {
                return Err(shape_err("linear", format!("bias {:?} vs {q}", bv.shape())));
            }
            for r in 0..rows {
                out[r * q..(r + 1) * q].copy_from_slice(bv.data());
            }
        }
        gemm(xv.data(), w.data(), &mut out, rows, p, q, false, transposed);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = q;
        let value = Tensor::from_parts(shape, out);
        self.push(
            Op::Linear {
                x,
                weight,
                bias,
                transposed,
            },
            Some(value),
            true,
        )
    }

    /// Row lookup into `table: [M, d]`; output shape is `shape ++ [d]`.
    pub fn gather(&mut self, table: ParamId, indices: Vec<Option<usize>>, shape: &[usize]) -> Result<NodeId> {
        let tv = self.params.get(table);
        if tv.rank() != 2 {
            return Err(shape_err("gather", format!("table {:?}", tv.shape())));
        }
        let (m, d) = (tv.shape()[0], tv.shape()[1]);
        if shape.iter().product::<usize>() != indices.len() {
            return Err(shape_err(
                "gather",
                format!("{} indices for shape {shape:?}", indices.len()),
            ));
        }
        let mut out = vec![S::zero(); indices.len() * d];
        for (r, idx) in indices.iter().enumerate() {
            if let Some(i) = *idx {
                if i >= m {
                    return Err(Error::IndexOutOfRange { index: i, size: m });
                }
                out[r * d..(r + 1) * d].copy_from_slice(tv.row(i));
            }
        }
        let mut oshape = shape.to_vec();
        oshape.push(d);
        self.push(
            Op::Gather { table, indices },
            Some(Tensor::from_parts(oshape, out)),
            true,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), Some(v), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), Some(v), rg)
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: NodeId, c: Tensor<S>) -> Result<NodeId> {
        let v = self.value(x).zip_map(&c, |a, b| a * b)?;
        let rg = self.rg(x);
        self.push(Op::MulConst { x, c }, Some(v), rg)
    }

    pub fn scale(&mut self, x: NodeId, k: S) -> Result<NodeId> {
        let v = self.value(x).scale(k);
        let rg = self.rg(x);
        self.push(Op::Scale(x, k), Some(v), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|a| a.max(S::zero()));
        let rg = self.rg(x);
        self.push(Op::Relu(x), Some(v), rg)
    }

    /// Exact GELU, `x Φ(x)`.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|a| a * a.norm_cdf());
        let rg = self.rg(x);
        self.push(Op::Gelu(x), Some(v), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: ParamId, bias: ParamId, eps: S) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (g, b) = (self.params.get(gain), self.params.get(bias));
        if g.numel() != d || b.numel() != d {
            return Err(shape_err("layer_norm", format!("gain/bias vs width {d}")));
        }
        let rows = xv.rows();
        let inv_d = S::one() / S::cast(d as f64);
        let mut xhat = vec![S::zero(); rows * d];
        let mut out = vec![S::zero(); rows * d];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) * inv_d;
            let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for k in 0..d {
                let h = (row[k] - mean) * is;
                xhat[r * d + k] = h;
                out[r * d + k] = g.data()[k] * h + b.data()[k];
            }
        }
        let shape = xv.shape().to_vec();
        let xhat = Tensor::from_parts(shape.clone(), xhat);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            Some(Tensor::from_parts(shape, out)),
            true,
        )
    }

    /// `[.., m, k] x [.., k, n]`, or `[.., m, k] x [.., n, k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, rb) = (av.rank(), bv.rank());
        if ra < 2 || ra != rb || av.shape()[..ra - 2] != bv.shape()[..rb - 2] {
            return Err(shape_err(
                "batch_matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k) = (av.shape()[ra - 2], av.shape()[ra - 1]);
        let (kb, n) = if trans_b {
            (bv.shape()[rb - 1], bv.shape()[rb - 2])
        } else {
            (bv.shape()[rb - 2], bv.shape()[rb - 1])
        };
        if k != kb {
            return Err(shape_err(
                "batch_matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let batches: usize = av.shape()[..ra - 2].iter().product();
        let mut out = vec![S::zero(); batches * m * n];
        for t in 0..batches {
            gemm(
                &av.data()[t * m * k..(t + 1) * m * k],
                &bv.data()[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
                false,
                trans_b,
            );
        }
        let mut shape = av.shape()[..ra - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Op::BatchMatMul { a, b, trans_b },
            Some(Tensor::from_parts(shape, out)),
            rg,
        )
    }

    /// `[B, L, h * dh] -> [B, h, L, dh]`.
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 || !xv.shape()[2].is_multiple_of(heads) {
            return Err(shape_err("split_heads", format!("{:?} / {heads}", xv.shape())));
        }
        let (b, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let dh = d / heads;
        let mut out = vec![S::zero(); b * l * d];
        for bi in 0..b {
            for t in 0..l {
                for h in 0..heads {
                    let src = (bi * l + t) * d + h * dh;
                    let dst = ((bi * heads + h) * l + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Op::SplitHeads { x, heads },
            Some(Tensor::from_parts(vec![b, heads, l, dh], out)),
            rg,
        )
    }

    /// `[B, h, L, dh] -> [B, L, h * dh]`.
    pub fn merge_heads(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(shape_err("merge_heads", format!("{:?}", xv.shape())));
        }
        let (b, heads, l, dh) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let d = heads * dh;
        let mut out = vec![S::zero(); b * l * d];
        for bi in 0..b {
            for h in 0..heads {
                for t in 0..l {
                    let src = ((bi * heads + h) * l + t) * dh;
                    let dst = (bi * l + t) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Op::MergeHeads { x, heads },
            Some(Tensor::from_parts(vec![b, l, d], out)),
            rg,
        )
    }

    /// Log-domain attention correction `-factor * ⟨q_i, q_i⟩ * var_j`.
    ///
    /// `q: [B, h, L, dh]`, `var: [B, h, L]` (per-key scalar variance); the
    /// output `[B, h, L, L]` is added to the attention logits.
    pub fn variance_shift(&mut self, q: NodeId, var: Tensor<S>, factor: S) -> Result<NodeId> {
        let qv = self.value(q);
        if qv.rank() != 4 || var.shape() != &qv.shape()[..3] {
            return Err(shape_err(
                "variance_shift",
                format!("q {:?} var {:?}", qv.shape(), var.shape()),
            ));
        }
        let (b, h, l, dh) = (qv.shape()[0], qv.shape()[1], qv.shape()[2], qv.shape()[3]);
        let mut out = vec![S::zero(); b * h * l * l];
        for bh in 0..b * h {
            for i in 0..l {
                let qi = &qv.data()[(bh * l + i) * dh..(bh * l + i + 1) * dh];
                let energy = qi.iter().fold(S::zero(), |a, &v| a + v * v);
                for j in 0..l {
                    out[(bh * l + i) * l + j] = -(factor * energy * var.data()[bh * l + j]);
                }
            }
        }
        let rg = self.rg(q);
        self.push(
            Op::VarianceShift { q, var, factor },
            Some(Tensor::from_parts(vec![b, h, l, l], out)),
            rg,
        )
    }

    /// Softmax over the last axis. With a mask, `x` is `[B, h, L, L]` and
    /// hidden entries get probability zero.
    pub fn softmax(&mut self, x: NodeId, mask: Option<AttentionMask>) -> Result<NodeId> {
        let xv = self.value(x);
        let w = xv.last_dim();
        if let Some(m) = &mask {
            let s = xv.shape();
            if s.len() != 4 || s[0] != m.batch || s[2] != m.len || s[3] != m.len {
                return Err(shape_err("softmax", format!("{s:?} vs mask {}x{}", m.batch, m.len)));
            }
        }
        let heads = if mask.is_some() { xv.shape()[1] } else { 1 };
        let mut out = vec![S::zero(); xv.numel()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let (b, i) = if mask.is_some() {
                let l = w;
                (r / (heads * l), r % l)
            } else {
                (0, 0)
            };
            let vis = |j: usize| mask.as_ref().is_none_or(|m| m.get(b, i, j));
            let mut mx = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if vis(j) && v > mx {
                    mx = v;
                }
            }
            let orow = &mut out[r * w..(r + 1) * w];
            let mut z = S::zero();
            for (j, o) in orow.iter_mut().enumerate() {
                if vis(j) {
                    *o = (row[j] - mx).exp();
                    z += *o;
                }
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(Op::Softmax { x }, Some(Tensor::from_parts(shape, out)), rg)
    }

    /// `[B, L, d] -> [B, d]` at sequence position `pos`.
    pub fn select_position(&mut self, x: NodeId, pos: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 || pos >= xv.shape()[1] {
            return Err(shape_err("select_position", format!("{:?} @ {pos}", xv.shape())));
        }
        let (b, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let s = (bi * l + pos) * d;
            out.extend_from_slice(&xv.data()[s..s + d]);
        }
        let rg = self.rg(x);
        self.push(
            Op::SelectPosition { x, pos },
            Some(Tensor::from_parts(vec![b, d], out)),
            rg,
        )
    }

    /// Per-sample cross-entropy of `logits: [B, M]` against `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("{:?} vs {} targets", lv.shape(), targets.len()),
            ));
        }
        let (b, m) = (lv.shape()[0], lv.shape()[1]);
        let mut probs = vec![S::zero(); b * m];
        let mut loss = Vec::with_capacity(b);
        for (i, &y) in targets.iter().enumerate() {
            if y >= m {
                return Err(Error::IndexOutOfRange { index: y, size: m });
            }
            let row = lv.row(i);
            let mx = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
            let z = row.iter().fold(S::zero(), |a, &v| a + (v - mx).exp());
            let lse = mx + z.ln();
            for j in 0..m {
                probs[i * m + j] = (row[j] - lse).exp();
            }
            loss.push(lse - row[y]);
        }
        let rg = self.rg(logits);
        self.push(
            Op::CrossEntropy {
                logits,
                targets,
                probs: Tensor::from_parts(vec![b, m], probs),
            },
            Some(Tensor::from_parts(vec![b], loss)),
            rg,
        )
    }

    /// Sums every axis but the first: `[B, ...] -> [B]`.
    pub fn sum_to_batch(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let b = xv.shape()[0];
        let w = xv.numel() / b;
        let out: Vec<S> = (0..b)
            .map(|i| xv.data()[i * w..(i + 1) * w].iter().fold(S::zero(), |a, &v| a + v))
            .collect();
        let rg = self.rg(x);
        self.push(Op::SumToBatch(x), Some(Tensor::from_parts(vec![b], out)), rg)
    }

    /// Gradient of `mean(loss)`.
    pub fn forward_backward(&self, loss: NodeId) -> Result<Backward<S>> {
        let b = self.value(loss).numel();
        let w = S::one() / S::cast(b as f64);
        self.backward(loss, &vec![w; b])
    }

    /// Gradient of `Σ_i weights_i * loss_i`; weights must be nonnegative.
    pub fn weighted_backward(&self, loss: NodeId, weights: &[S]) -> Result<Backward<S>> {
        if weights.iter().any(|w| *w < S::zero() || !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        self.backward(loss, weights)
    }

    /// Reverse sweep seeded with `d(objective)/d(loss_i) = weights_i`.
    pub fn backward(&self, loss: NodeId, weights: &[S]) -> Result<Backward<S>> {
        let lv = self.value(loss);
        if weights.len() != lv.numel() {
            return Err(shape_err(
                "backward",
                format!("{} weights for loss {:?}", weights.len(), lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor<S>>> = (0..self.params.len()).map(|_| None).collect();
        let mut captures = Vec::new();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), weights.to_vec()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(p) => accumulate(&mut param_grads[p.0], g),
                Op::Linear {
                    x,
                    weight,
                    bias,
                    transposed,
                } => {
                    let xv = self.value(*x);
                    let w = self.params.get(*weight);
                    let (rows, p) = (xv.rows(), xv.last_dim());
                    let q = g.last_dim();
                    if self.rg(*x) {
                        let mut dx = vec![S::zero(); rows * p];
                        gemm(g.data(), w.data(), &mut dx, rows, q, p, false, !transposed);
                        accumulate(&mut grads[x.0], Tensor::from_parts(xv.shape().to_vec(), dx));
                    }
                    let mut dw = vec![S::zero(); p * q];
                    if *transposed {
                        gemm(g.data(), xv.data(), &mut dw, q, rows, p, true, false);
                    } else {
                        gemm(xv.data(), g.data(), &mut dw, p, rows, q, true, false);
                    }
                    accumulate(&mut param_grads[weight.0], Tensor::from_parts(w.shape().to_vec(), dw));
                    if let Some(b) = bias {
                        let mut db = vec![S::zero(); q];
                        for r in 0..rows {
                            for (d, &v) in db.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut param_grads[b.0], Tensor::from_parts(vec![q], db));
                    }
                    captures.push(Capture {
                        node: NodeId(idx),
                        kind: CaptureKind::Linear {
                            weight: *weight,
                            bias: *bias,
                            transposed: *transposed,
                        },
                        output_grad: as_btq(g)?,
                    });
                }
                Op::Gather { table, indices } => {
                    let tv = self.params.get(*table);
                    let d = tv.shape()[1];
                    let mut dt = vec![S::zero(); tv.numel()];
                    for (r, idx) in indices.iter().enumerate() {
                        if let Some(i) = *idx {
                            for (a, &v) in dt[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                                *a += v;
                            }
                        }
                    }
                    accumulate(&mut param_grads[table.0], Tensor::from_parts(tv.shape().to_vec(), dt));
                    captures.push(Capture {
                        node: NodeId(idx),
                        kind: CaptureKind::Gather { table: *table },
                        output_grad: as_btq(g)?,
                    });
                }
                Op::Add(a, b) => {
                    if self.rg(*a) && self.rg(*b) {
                        accumulate(&mut grads[a.0], g.clone());
                        accumulate(&mut grads[b.0], g);
                    } else if self.rg(*a) {
                        accumulate(&mut grads[a.0], g);
                    } else if self.rg(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.rg(*b) {
                        let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::MulConst { x, c } => {
                    accumulate(&mut grads[x.0], g.zip_map(c, |a, b| a * b)?);
                }
                Op::Scale(x, k) => accumulate(&mut grads[x.0], g.scale(*k)),
                Op::Relu(x) => {
                    let dx = g.zip_map(self.value(*x), |gv, xv| if xv > S::zero() { gv } else { S::zero() })?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Gelu(x) => {
                    let dx = g.zip_map(self.value(*x), |gv, xv| gv * (xv.norm_cdf() + xv * xv.norm_pdf()))?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.params.get(*gain);
                    let d = xhat.last_dim();
                    let rows = xhat.rows();
                    let inv_d = S::one() / S::cast(d as f64);
                    let mut dg = vec![S::zero(); d];
                    let mut db = vec![S::zero(); d];
                    let mut dx = vec![S::zero(); rows * d];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for k in 0..d {
                            dg[k] += gr[k] * hr[k];
                            db[k] += gr[k];
                            let dh = gr[k] * gv.data()[k];
                            s1 += dh;
                            s2 += dh * hr[k];
                        }
                        let (m1, m2) = (s1 * inv_d, s2 * inv_d);
                        for k in 0..d {
                            let dh = gr[k] * gv.data()[k];
                            dx[r * d + k] = inv_std[r] * (dh - m1 - hr[k] * m2);
                        }
                    }
                    accumulate(&mut param_grads[gain.0], Tensor::from_parts(vec![d], dg));
                    accumulate(&mut param_grads[bias.0], Tensor::from_parts(vec![d], db));
                    if self.rg(*x) {
                        accumulate(&mut grads[x.0], Tensor::from_parts(xhat.shape().to_vec(), dx));
                    }
                    captures.push(Capture {
                        node: NodeId(idx),
                        kind: CaptureKind::LayerNorm {
                            gain: *gain,
                            bias: *bias,
                        },
                        output_grad: as_btq(g)?,
                    });
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let r = av.rank();
                    let (m, k) = (av.shape()[r - 2], av.shape()[r - 1]);
                    let n = g.shape()[r - 1];
                    let batches = av.numel() / (m * k);
                    if self.rg(*a) {
                        // da = g · opᵀ(b)
                        let mut da = vec![S::zero(); av.numel()];
                        for t in 0..batches {
                            gemm(
                                &g.data()[t * m * n..(t + 1) * m * n],
                                &bv.data()[t * k * n..(t + 1) * k * n],
                                &mut da[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                                false,
                                !trans_b,
                            );
                        }
                        accumulate(&mut grads[a.0], Tensor::from_parts(av.shape().to_vec(), da));
                    }
                    if self.rg(*b) {
                        let mut dbv = vec![S::zero(); bv.numel()];
                        for t in 0..batches {
                            let gs = &g.data()[t * m * n..(t + 1) * m * n];
                            let asl = &av.data()[t * m * k..(t + 1) * m * k];
                            let out = &mut dbv[t * k * n..(t + 1) * k * n];
                            if *trans_b {
                                // b: [n, k], db = gᵀ a
                                gemm(gs, asl, out, n, m, k, true, false);
                            } else {
                                // b: [k, n], db = aᵀ g
                                gemm(asl, gs, out, k, m, n, true, false);
                            }
                        }
                        accumulate(&mut grads[b.0], Tensor::from_parts(bv.shape().to_vec(), dbv));
                    }
                }
                Op::SplitHeads { x, heads } => {
                    let (b, h, l, dh) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
                    debug_assert_eq!(h, *heads);
                    let d = h * dh;
                    let mut dx = vec![S::zero(); g.numel()];
                    for bi in 0..b {
                        for hi in 0..h {
                            for t in 0..l {
                                let src = ((bi * h + hi) * l + t) * dh;
                                let dst = (bi * l + t) * d + hi * dh;
                                dx[dst..dst + dh].copy_from_slice(&g.data()[src..src + dh]);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_parts(vec![b, l, d], dx));
                }
                Op::MergeHeads { x, heads } => {
                    let (b, l, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                    let h = *heads;
                    let dh = d / h;
                    let mut dx = vec![S::zero(); g.numel()];
                    for bi in 0..b {
                        for t in 0..l {
                            for hi in 0..h {
                                let src = (bi * l + t) * d + hi * dh;
                                let dst = ((bi * h + hi) * l + t) * dh;
                                dx[dst..dst + dh].copy_from_slice(&g.data()[src..src + dh]);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_parts(vec![b, h, l, dh], dx));
                }
                Op::VarianceShift { q, var, factor } => {
                    let qv = self.value(*q);
                    let (b, h, l, dh) = (qv.shape()[0], qv.shape()[1], qv.shape()[2], qv.shape()[3]);
                    let two = S::cast(2.0);
                    let mut dq = vec![S::zero(); qv.numel()];
                    for bh in 0..b * h {
                        for i in 0..l {
                            let grow = &g.data()[(bh * l + i) * l..(bh * l + i + 1) * l];
                            let vrow = &var.data()[bh * l..(bh + 1) * l];
                            let s = grow.iter().zip(vrow).fold(S::zero(), |a, (&gv, &vv)| a + gv * vv);
                            let coef = -(two * *factor * s);
                            let base = (bh * l + i) * dh;
                            for k in 0..dh {
                                dq[base + k] = coef * qv.data()[base + k];
                            }
                        }
                    }
                    accumulate(&mut grads[q.0], Tensor::from_parts(qv.shape().to_vec(), dq));
                }
                Op::Softmax { x, .. } => {
                    let y = node.value.as_ref().unwrap();
                    let w = y.last_dim();
                    let mut dx = vec![S::zero(); y.numel()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s = yr.iter().zip(gr).fold(S::zero(), |a, (&yv, &gv)| a + yv * gv);
                        for j in 0..w {
                            dx[r * w + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_parts(y.shape().to_vec(), dx));
                }
                Op::SelectPosition { x, pos } => {
                    let xv = self.value(*x);
                    let (b, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let mut dx = vec![S::zero(); xv.numel()];
                    for bi in 0..b {
                        let s = (bi * l + pos) * d;
                        dx[s..s + d].copy_from_slice(g.row(bi));
                    }
                    accumulate(&mut grads[x.0], Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let m = probs.last_dim();
                    let mut dl = probs.data().to_vec();
                    for (i, &y) in targets.iter().enumerate() {
                        dl[i * m + y] -= S::one();
                        let w = g.data()[i];
                        for v in &mut dl[i * m..(i + 1) * m] {
                            *v *= w;
                        }
                    }
                    accumulate(&mut grads[logits.0], Tensor::from_parts(probs.shape().to_vec(), dl));
                }
                Op::SumToBatch(x) => {
                    let xv = self.value(*x);
                    let b = xv.shape()[0];
                    let w = xv.numel() / b;
                    let mut dx = Vec::with_capacity(xv.numel());
                    for i in 0..b {
                        dx.extend(std::iter::repeat_n(g.data()[i], w));
                    }
                    accumulate(&mut grads[x.0], Tensor::from_parts(xv.shape().to_vec(), dx));
                }
            }
        }
        Ok(Backward { param_grads, captures })
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shapes agree"),
        None => *slot = Some(g),
    }
}

/// Views an output gradient as `[B, T, q]`.
fn as_btq<S: Scalar>(g: Tensor<S>) -> Result<Tensor<S>> {
    let s = g.shape().to_vec();
    match s.len() {
        2 => g.reshape(&[s[0], 1, s[1]]),
        3 => Ok(g),
        n if n > 3 => {
            let t: usize = s[1..n - 1].iter().product();
            g.reshape(&[s[0], t, s[n - 1]])
        }
        _ => Err(shape_err("capture", format!("output {s:?} lacks a batch axis"))),
    }
}
