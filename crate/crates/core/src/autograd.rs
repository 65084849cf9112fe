//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! A [`Graph`] records every operation as a node in a flat tape. Nodes only
//! ever reference earlier nodes, so the backward pass is a single reverse
//! sweep. Parameters can be bound by reference, which keeps inference passes
//! from copying the model.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::ctc::ctc_nll;
use crate::tensor::{gemm, Array};

/// Additive value used for disallowed attention entries.
pub const MASK_FILL: f64 = -1e9;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { x: usize, w: usize },
    Bmm { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    Mul { a: usize, b: usize },
    MulConst { x: usize, c: Vec<f64> },
    Scale { x: usize, c: f64 },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Softmax { x: usize },
    LogSoftmax { x: usize },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu { x: usize },
    Glu { x: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Unfold { x: usize, k: usize, stride: usize },
    DepthwiseConv { x: usize, kernel: usize },
    RelShift { x: usize },
    AttnMask { x: usize, keep: Vec<bool> },
    MaskedMeanTime { x: usize, lens: Vec<usize> },
    SelectRows { x: usize, idx: Vec<usize> },
    Sum { x: usize },
    WeightedSum { terms: Vec<(usize, f64)> },
    /// Loss nodes whose gradient w.r.t. `logits` is computed in the forward pass.
    FusedLoss { logits: usize, grad: Vec<f64> },
}

struct Node<'p> {
    value: Cow<'p, Array>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Confined to one thread; parameters borrowed for `'p`.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar w.r.t. every leaf that required one.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise numerically stable softmax of `data` viewed as `[rows, c]`.
pub(crate) fn softmax_rows(data: &[f64], c: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; data.len()];
    if c == 0 {
        return Ok(out);
    }
    for (row, o) in data.chunks(c).zip(out.chunks_mut(c)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max.is_nan() || row.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in softmax input".into()));
        }
        let mut z = 0.0;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - max).exp();
            z += *oi;
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    Ok(out)
}

/// Row-wise log-softmax of `data` viewed as `[rows, c]`.
pub(crate) fn log_softmax_rows(data: &[f64], c: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; data.len()];
    if c == 0 {
        return Ok(out);
    }
    for (row, o) in data.chunks(c).zip(out.chunks_mut(c)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max.is_nan() || row.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in log_softmax input".into()));
        }
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = v - lse;
        }
    }
    Ok(out)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    loop {
        out.push(data[off]);
        let mut d = rank;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array, op: Op, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that borrows its value, typically a model parameter.
    pub fn borrowed(&mut self, value: &'p Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x[..., K] · w[K, N]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::shape("matmul", xs, ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).len() / k.max(1);
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            k,
            1,
            self.value(w).data(),
            n,
            1,
            &mut out,
            0.0,
        );
        let value = Array::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { x: x.0, w: w.0 }, &[x.0, w.0]))
    }

    /// Affine map `x·w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Batched product of `a[G,n,k]` with `b[G,k,m]`, or with `b[G,m,k]`
    /// transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a);
        let bs = self.shape(b);
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(Error::shape("bmm", as_, bs));
        }
        let (g, n, k) = (as_[0], as_[1], as_[2]);
        let (bk, m) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if bk != k {
            return Err(Error::shape("bmm", as_, bs));
        }
        let mut out = vec![0.0; g * n * m];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        for gi in 0..g {
            let a_s = &ad[gi * n * k..(gi + 1) * n * k];
            let b_s = &bd[gi * k * m..(gi + 1) * k * m];
            let o = &mut out[gi * n * m..(gi + 1) * n * m];
            if trans_b {
                gemm(n, k, m, a_s, k, 1, b_s, 1, k, o, 0.0);
            } else {
                gemm(n, k, m, a_s, k, 1, b_s, m, 1, o, 0.0);
            }
        }
        let value = Array::new(vec![g, n, m], out)?;
        Ok(self.push(
            value,
            Op::Bmm {
                a: a.0,
                b: b.0,
                trans_b,
            },
            &[a.0, b.0],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Array::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// `x + b` where `b`'s shape is a trailing suffix of `x`'s shape.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape("add_bias", xs, bs));
        }
        let bd = self.value(b).data();
        let bl = bd.len().max(1);
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % bl])
            .collect();
        let value = Array::new(xs.to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x: x.0, b: b.0 }, &[x.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Array::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Element-wise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Array) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("mul_const", self.shape(x), c.shape()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .collect();
        let value = Array::new(c.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::MulConst {
                x: x.0,
                c: c.data().to_vec(),
            },
            &[x.0],
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x: x.0, c }, &[x.0])
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask = Array::from_fn(self.shape(x), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.mul_const(x, &mask)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x: x.0 }, &[x.0]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", xs, perm));
        }
        let (data, shape) = permute_data(self.value(x).data(), xs, perm);
        let value = Array::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
            &[x.0],
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        let data = softmax_rows(self.value(x).data(), c)?;
        let value = Array::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Softmax { x: x.0 }, &[x.0]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        let data = log_softmax_rows(self.value(x).data(), c)?;
        let value = Array::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax { x: x.0 }, &[x.0]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Array::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu { x: x.0 }, &[x.0])
    }

    /// Gated linear unit over the last axis: `a ⊙ sigmoid(b)` for `x = [a | b]`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if !c.is_multiple_of(2) {
            return Err(Error::shape("glu", self.shape(x), &[c]));
        }
        let h = c / 2;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len() / 2);
        for row in xd.chunks(c) {
            for j in 0..h {
                out.push(row[j] * sigmoid(row[h + j]));
            }
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = h;
        let value = Array::new(shape, out)?;
        Ok(self.push(value, Op::Glu { x: x.0 }, &[x.0]))
    }

    /// Gathers rows of `table[V, d]`; output shape is `ids_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || ids.len() != ids_shape.iter().product::<usize>() {
            return Err(Error::shape("embedding", ts, ids_shape));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Usage(format!("token id {bad} outside vocabulary of {v}")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Array::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Sliding windows over time for strided convolution:
    /// `x[B,U,C] -> [B, ceil(U/stride), k*C]`, zero padded by `(k-1)/2`.
    pub fn unfold_time(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || k.is_multiple_of(2) || stride == 0 {
            return Err(Error::shape("unfold_time", xs, &[k, stride]));
        }
        let (b, u, c) = (xs[0], xs[1], xs[2]);
        let uo = u.div_ceil(stride);
        let pad = (k - 1) / 2;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * uo * k * c];
        for bi in 0..b {
            for j in 0..uo {
                for kk in 0..k {
                    let src = (j * stride + kk) as isize - pad as isize;
                    if src < 0 || src as usize >= u {
                        continue;
                    }
                    let s = (bi * u + src as usize) * c;
                    let o = ((bi * uo + j) * k + kk) * c;
                    out[o..o + c].copy_from_slice(&xd[s..s + c]);
                }
            }
        }
        let value = Array::new(vec![b, uo, k * c], out)?;
        Ok(self.push(value, Op::Unfold { x: x.0, k, stride }, &[x.0]))
    }

    /// Per-channel convolution along time with "same" zero padding:
    /// `x[B,U,D] * kernel[K,D] -> [B,U,D]`. `K` must be odd.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if ks.len() == 2 && ks[0].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "depthwise convolution kernel size must be odd, got {}",
                ks[0]
            )));
        }
        if xs.len() != 3 || ks.len() != 2 || ks[1] != xs[2] {
            return Err(Error::shape("depthwise_conv1d", xs, ks));
        }
        let (b, u, d) = (xs[0], xs[1], xs[2]);
        let k = ks[0];
        let pad = k / 2;
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut out = vec![0.0; b * u * d];
        for bi in 0..b {
            for t in 0..u {
                let o = &mut out[(bi * u + t) * d..(bi * u + t + 1) * d];
                for kk in 0..k {
                    let src = t as isize + kk as isize - pad as isize;
                    if src < 0 || src as usize >= u {
                        continue;
                    }
                    let xr = &xd[(bi * u + src as usize) * d..][..d];
                    let kr = &kd[kk * d..(kk + 1) * d];
                    for c in 0..d {
                        o[c] += kr[c] * xr[c];
                    }
                }
            }
        }
        let value = Array::new(vec![b, u, d], out)?;
        Ok(self.push(
            value,
            Op::DepthwiseConv {
                x: x.0,
                kernel: kernel.0,
            },
            &[x.0, kernel.0],
        ))
    }

    /// Relative-position shift: `x[G, n, 2n-1] -> y[G, n, n]` with
    /// `y[g,i,j] = x[g, i, n-1-i+j]`, where column `m` of `x` holds relative
    /// distance `i - j = n-1-m`.
    pub fn rel_shift(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || xs[2] + 1 != 2 * xs[1] {
            return Err(Error::shape("rel_shift", xs, &[]));
        }
        let (g, n, w) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; g * n * n];
        for gi in 0..g {
            for i in 0..n {
                for j in 0..n {
                    out[(gi * n + i) * n + j] = xd[(gi * n + i) * w + (n - 1 - i + j)];
                }
            }
        }
        let value = Array::new(vec![g, n, n], out)?;
        Ok(self.push(value, Op::RelShift { x: x.0 }, &[x.0]))
    }

    /// Fills disallowed entries of attention scores `x[B*H, n, m]` with
    /// [`MASK_FILL`]. `key_valid` is `[B][m]`; `causal` additionally hides
    /// keys after the query position.
    pub fn attn_mask(&mut self, x: Var, key_valid: &[Vec<bool>], causal: bool) -> Result<Var> {
        let xs = self.shape(x);
        let b = key_valid.len();
        if xs.len() != 3 || b == 0 || !xs[0].is_multiple_of(b) || key_valid.iter().any(|k| k.len() != xs[2]) {
            return Err(Error::shape("attn_mask", xs, &[b]));
        }
        let (g, n, m) = (xs[0], xs[1], xs[2]);
        let heads = g / b;
        let xd = self.value(x).data();
        let mut keep = vec![true; xd.len()];
        let mut out = xd.to_vec();
        for gi in 0..g {
            let kv = &key_valid[gi / heads];
            for i in 0..n {
                for j in 0..m {
                    if !kv[j] || (causal && j > i) {
                        let o = (gi * n + i) * m + j;
                        keep[o] = false;
                        out[o] = MASK_FILL;
                    }
                }
            }
        }
        let value = Array::new(vec![g, n, m], out)?;
        Ok(self.push(value, Op::AttnMask { x: x.0, keep }, &[x.0]))
    }

    /// Mean over the first `lens[b]` time steps: `x[B,U,D] -> [B,D]`.
    pub fn masked_mean_time(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || xs[0] != lens.len() || lens.iter().any(|&l| l == 0 || l > xs[1]) {
            return Err(Error::shape("masked_mean_time", xs, lens));
        }
        let (b, u, d) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for t in 0..lens[bi] {
                for (oc, v) in o.iter_mut().zip(&xd[(bi * u + t) * d..][..d]) {
                    *oc += v;
                }
            }
            o.iter_mut().for_each(|v| *v /= lens[bi] as f64);
        }
        let value = Array::new(vec![b, d], out)?;
        Ok(self.push(
            value,
            Op::MaskedMeanTime {
                x: x.0,
                lens: lens.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Picks entries along axis 0, repeating allowed: `out[i] = x[idx[i]]`.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || idx.iter().any(|&i| i >= xs[0]) {
            return Err(Error::shape("select_rows", xs, idx));
        }
        let inner: usize = xs[1..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&xd[i * inner..(i + 1) * inner]);
        }
        let mut shape = xs.to_vec();
        shape[0] = idx.len();
        let value = Array::new(shape, out)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            &[x.0],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x: x.0 }, &[x.0])
    }

    /// `Σ c_i · s_i` over single-element nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("weighted_sum", self.shape(v), &[]));
            }
            total += c * self.value(v).item();
        }
        let parents: Vec<usize> = terms.iter().map(|(v, _)| v.0).collect();
        let terms = terms.iter().map(|&(v, c)| (v.0, c)).collect();
        Ok(self.push(Array::scalar(total), Op::WeightedSum { terms }, &parents))
    }

    /// Label-smoothed cross entropy `Σ_r w_r·CE_r` over rows of `logits`
    /// viewed as `[R, V]`. Smoothing mass `eps` is spread uniformly over `V`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let v = self.value(logits).last_dim();
        let rows = self.value(logits).len() / v.max(1);
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Usage(format!("target {t} outside {v} classes")));
        }
        let logp = log_softmax_rows(self.value(logits).data(), v)?;
        let mut grad = vec![0.0; logp.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let w = weights[r];
            if w == 0.0 {
                continue;
            }
            let lp = &logp[r * v..(r + 1) * v];
            let nll = -lp[targets[r]];
            let smooth = -lp.iter().sum::<f64>() / v as f64;
            loss += w * ((1.0 - eps) * nll + eps * smooth);
            let g = &mut grad[r * v..(r + 1) * v];
            for c in 0..v {
                let q = eps / v as f64 + if c == targets[r] { 1.0 - eps } else { 0.0 };
                g[c] = w * (lp[c].exp() - q);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite cross entropy".into()));
        }
        Ok(self.push(
            Array::scalar(loss),
            Op::FusedLoss {
                logits: logits.0,
                grad,
            },
            &[logits.0],
        ))
    }

    /// CTC negative log-likelihood `Σ_b w_b · (−ln P(y_b | x_b))` over
    /// `logits[B, U, V]`, using the first `frame_lens[b]` frames.
    pub fn ctc_loss(
        &mut self,
        logits: Var,
        frame_lens: &[usize],
        targets: &[Vec<usize>],
        weights: &[f64],
        blank: usize,
    ) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 3
            || ls[0] != frame_lens.len()
            || ls[0] != targets.len()
            || ls[0] != weights.len()
            || frame_lens.iter().any(|&f| f > ls[1])
        {
            return Err(Error::shape("ctc_loss", ls, frame_lens));
        }
        let (b, u, v) = (ls[0], ls[1], ls[2]);
        let ld = self.value(logits).data();
        let mut grad = vec![0.0; ld.len()];
        let mut loss = 0.0;
        for bi in 0..b {
            if weights[bi] == 0.0 {
                continue;
            }
            let f = frame_lens[bi];
            let slice = &ld[bi * u * v..(bi * u + f) * v];
            let (nll, g) = ctc_nll(slice, f, v, &targets[bi], blank, true)?;
            loss += weights[bi] * nll;
            let g = g.expect("gradient requested");
            for (o, gv) in grad[bi * u * v..(bi * u + f) * v].iter_mut().zip(g) {
                *o = weights[bi] * gv;
            }
        }
        Ok(self.push(
            Array::scalar(loss),
            Op::FusedLoss {
                logits: logits.0,
                grad,
            },
            &[logits.0],
        ))
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| matches!(node.op, Op::Leaf))
                    .map(|g| Array::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn backward_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { x, w } => {
                let ws = self.nodes[w].value.shape();
                let (k, nn) = (ws[0], ws[1]);
                let xv = self.nodes[x].value.data();
                let m = xv.len() / k.max(1);
                if self.wants(x) {
                    let g = accum(grads, x, xv.len());
                    gemm(m, nn, k, gy, nn, 1, self.nodes[w].value.data(), 1, nn, g, 1.0);
                }
                if self.wants(w) {
                    let g = accum(grads, w, k * nn);
                    gemm(k, m, nn, xv, 1, k, gy, nn, 1, g, 1.0);
                }
            }
            &Op::Bmm { a, b, trans_b } => {
                let as_ = self.nodes[a].value.shape();
                let (g, n, k) = (as_[0], as_[1], as_[2]);
                let m = node.value.shape()[2];
                let ad = self.nodes[a].value.data();
                let bd = self.nodes[b].value.data();
                if self.wants(a) {
                    let ga = accum(grads, a, g * n * k);
                    for gi in 0..g {
                        let dy = &gy[gi * n * m..(gi + 1) * n * m];
                        let bs = &bd[gi * k * m..(gi + 1) * k * m];
                        let o = &mut ga[gi * n * k..(gi + 1) * n * k];
                        if trans_b {
                            gemm(n, m, k, dy, m, 1, bs, k, 1, o, 1.0);
                        } else {
                            gemm(n, m, k, dy, m, 1, bs, 1, m, o, 1.0);
                        }
                    }
                }
                if self.wants(b) {
                    let gb = accum(grads, b, g * k * m);
                    for gi in 0..g {
                        let dy = &gy[gi * n * m..(gi + 1) * n * m];
                        let as_ = &ad[gi * n * k..(gi + 1) * n * k];
                        let o = &mut gb[gi * k * m..(gi + 1) * k * m];
                        if trans_b {
                            gemm(m, n, k, dy, 1, m, as_, k, 1, o, 1.0);
                        } else {
                            gemm(k, n, m, as_, 1, k, dy, m, 1, o, 1.0);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for p in [a, b] {
                    if self.wants(p) {
                        let g = accum(grads, p, gy.len());
                        g.iter_mut().zip(gy).for_each(|(o, v)| *o += v);
                    }
                }
            }
            &Op::AddBias { x, b } => {
                if self.wants(x) {
                    let g = accum(grads, x, gy.len());
                    g.iter_mut().zip(gy).for_each(|(o, v)| *o += v);
                }
                if self.wants(b) {
                    let bl = self.nodes[b].value.len();
                    let g = accum(grads, b, bl);
                    for (j, v) in gy.iter().enumerate() {
                        g[j % bl] += v;
                    }
                }
            }
            &Op::Mul { a, b } => {
                let ad = self.nodes[a].value.data();
                let bd = self.nodes[b].value.data();
                if self.wants(a) {
                    let g = accum(grads, a, gy.len());
                    for j in 0..gy.len() {
                        g[j] += gy[j] * bd[j];
                    }
                }
                if self.wants(b) {
                    let g = accum(grads, b, gy.len());
                    for j in 0..gy.len() {
                        g[j] += gy[j] * ad[j];
                    }
                }
            }
            Op::MulConst { x, c } => {
                let g = accum(grads, *x, gy.len());
                for j in 0..gy.len() {
                    g[j] += gy[j] * c[j];
                }
            }
            &Op::Scale { x, c } => {
                let g = accum(grads, x, gy.len());
                g.iter_mut().zip(gy).for_each(|(o, v)| *o += c * v);
            }
            &Op::Reshape { x } => {
                let g = accum(grads, x, gy.len());
                g.iter_mut().zip(gy).for_each(|(o, v)| *o += v);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (j, &p) in perm.iter().enumerate() {
                    inv[p] = j;
                }
                let (back, _) = permute_data(gy, node.value.shape(), &inv);
                let g = accum(grads, *x, gy.len());
                g.iter_mut().zip(&back).for_each(|(o, v)| *o += v);
            }
            &Op::Softmax { x } => {
                let c = node.value.last_dim();
                let g = accum(grads, x, gy.len());
                for r in 0..gy.len() / c.max(1) {
                    let y = &out[r * c..(r + 1) * c];
                    let dy = &gy[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[r * c + j] += y[j] * (dy[j] - dot);
                    }
                }
            }
            &Op::LogSoftmax { x } => {
                let c = node.value.last_dim();
                let g = accum(grads, x, gy.len());
                for r in 0..gy.len() / c.max(1) {
                    let y = &out[r * c..(r + 1) * c];
                    let dy = &gy[r * c..(r + 1) * c];
                    let s: f64 = dy.iter().sum();
                    for j in 0..c {
                        g[r * c + j] += dy[j] - y[j].exp() * s;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gam = self.nodes[*gamma].value.data();
                if self.wants(*gamma) {
                    let g = accum(grads, *gamma, d);
                    for (j, v) in gy.iter().enumerate() {
                        g[j % d] += v * xhat[j];
                    }
                }
                if self.wants(*beta) {
                    let g = accum(grads, *beta, d);
                    for (j, v) in gy.iter().enumerate() {
                        g[j % d] += v;
                    }
                }
                if self.wants(*x) {
                    let g = accum(grads, *x, gy.len());
                    for (r, &rs) in rstd.iter().enumerate() {
                        let dy = &gy[r * d..(r + 1) * d];
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = dy[j] * gam[j];
                            m1 += dh;
                            m2 += dh * h[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            g[r * d + j] += rs * (dy[j] * gam[j] - m1 - h[j] * m2);
                        }
                    }
                }
            }
            &Op::Silu { x } => {
                let xd = self.nodes[x].value.data();
                let g = accum(grads, x, gy.len());
                for j in 0..gy.len() {
                    let s = sigmoid(xd[j]);
                    g[j] += gy[j] * s * (1.0 + xd[j] * (1.0 - s));
                }
            }
            &Op::Glu { x } => {
                let xd = self.nodes[x].value.data();
                let c = self.nodes[x].value.last_dim();
                let h = c / 2;
                let g = accum(grads, x, xd.len());
                for r in 0..xd.len() / c.max(1) {
                    for j in 0..h {
                        let a = xd[r * c + j];
                        let s = sigmoid(xd[r * c + h + j]);
                        let dy = gy[r * h + j];
                        g[r * c + j] += dy * s;
                        g[r * c + h + j] += dy * a * s * (1.0 - s);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.last_dim();
                let tl = self.nodes[*table].value.len();
                let g = accum(grads, *table, tl);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        g[id * d + c] += gy[r * d + c];
                    }
                }
            }
            &Op::Unfold { x, k, stride } => {
                let xs = self.nodes[x].value.shape();
                let (b, u, c) = (xs[0], xs[1], xs[2]);
                let uo = node.value.shape()[1];
                let pad = (k - 1) / 2;
                let g = accum(grads, x, b * u * c);
                for bi in 0..b {
                    for j in 0..uo {
                        for kk in 0..k {
                            let src = (j * stride + kk) as isize - pad as isize;
                            if src < 0 || src as usize >= u {
                                continue;
                            }
                            let s = (bi * u + src as usize) * c;
                            let o = ((bi * uo + j) * k + kk) * c;
                            for ci in 0..c {
                                g[s + ci] += gy[o + ci];
                            }
                        }
                    }
                }
            }
            &Op::DepthwiseConv { x, kernel } => {
                let xs = self.nodes[x].value.shape();
                let (b, u, d) = (xs[0], xs[1], xs[2]);
                let k = self.nodes[kernel].value.shape()[0];
                let pad = k / 2;
                let xd = self.nodes[x].value.data();
                let kd = self.nodes[kernel].value.data();
                let want_x = self.wants(x);
                let want_k = self.wants(kernel);
                let mut gx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
                let mut gk = if want_k { vec![0.0; kd.len()] } else { Vec::new() };
                for bi in 0..b {
                    for t in 0..u {
                        let dy = &gy[(bi * u + t) * d..][..d];
                        for kk in 0..k {
                            let src = t as isize + kk as isize - pad as isize;
                            if src < 0 || src as usize >= u {
                                continue;
                            }
                            let xo = (bi * u + src as usize) * d;
                            for c in 0..d {
                                if want_x {
                                    gx[xo + c] += kd[kk * d + c] * dy[c];
                                }
                                if want_k {
                                    gk[kk * d + c] += xd[xo + c] * dy[c];
                                }
                            }
                        }
                    }
                }
                if want_x {
                    let g = accum(grads, x, xd.len());
                    g.iter_mut().zip(&gx).for_each(|(o, v)| *o += v);
                }
                if want_k {
                    let g = accum(grads, kernel, kd.len());
                    g.iter_mut().zip(&gk).for_each(|(o, v)| *o += v);
                }
            }
            &Op::RelShift { x } => {
                let xs = self.nodes[x].value.shape();
                let (gn, n, w) = (xs[0], xs[1], xs[2]);
                let g = accum(grads, x, gn * n * w);
                for gi in 0..gn {
                    for i in 0..n {
                        for j in 0..n {
                            g[(gi * n + i) * w + (n - 1 - i + j)] += gy[(gi * n + i) * n + j];
                        }
                    }
                }
            }
            Op::AttnMask { x, keep } => {
                let g = accum(grads, *x, gy.len());
                for j in 0..gy.len() {
                    if keep[j] {
                        g[j] += gy[j];
                    }
                }
            }
            Op::MaskedMeanTime { x, lens } => {
                let xs = self.nodes[*x].value.shape();
                let (b, u, d) = (xs[0], xs[1], xs[2]);
                let g = accum(grads, *x, b * u * d);
                for bi in 0..b {
                    let inv = 1.0 / lens[bi] as f64;
                    for t in 0..lens[bi] {
                        for c in 0..d {
                            g[(bi * u + t) * d + c] += gy[bi * d + c] * inv;
                        }
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                let xl = self.nodes[*x].value.len();
                let inner = xl / self.nodes[*x].value.shape()[0].max(1);
                let g = accum(grads, *x, xl);
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..inner {
                        g[i * inner + c] += gy[r * inner + c];
                    }
                }
            }
            &Op::Sum { x } => {
                let l = self.nodes[x].value.len();
                let g = accum(grads, x, l);
                g.iter_mut().for_each(|o| *o += gy[0]);
            }
            Op::WeightedSum { terms } => {
                for &(p, c) in terms {
                    if self.wants(p) {
                        let g = accum(grads, p, 1);
                        g[0] += c * gy[0];
                    }
                }
            }
            Op::FusedLoss { logits, grad } => {
                let g = accum(grads, *logits, grad.len());
                g.iter_mut().zip(grad).for_each(|(o, v)| *o += gy[0] * v);
            }
        }
    }
}

/// Compares reverse-mode gradients of `f` against central finite differences
/// at every coordinate of `params`. Returns the maximum relative error.
pub fn grad_check<F>(f: F, params: &[Array], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, a)| (0..a.len()).map(move |j| (p, j)))
        .collect();
    grad_check_coords(f, params, eps, &coords)
}

/// Like [`grad_check`] but only at `n` coordinates drawn by `rng`.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Array],
    eps: f64,
    n: usize,
    rng: &mut impl Rng,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let total: usize = params.iter().map(|a| a.len()).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let coords: Vec<(usize, usize)> = (0..n)
        .map(|_| {
            let mut flat = rng.gen_range(0..total);
            let mut p = 0;
            while flat >= params[p].len() {
                flat -= params[p].len();
                p += 1;
            }
            (p, flat)
        })
        .collect();
    grad_check_coords(f, params, eps, &coords)
}

fn grad_check_coords<F>(f: F, params: &[Array], eps: f64, coords: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.borrowed(p, true)).collect();
        let y = f(&mut g, &vars)?;
        if !g.value(y).item().is_finite() {
            return Err(Error::Numeric("grad_check objective is not finite".into()));
        }
        let grads = g.backward(y)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Array::zeros(p.shape())))
            .collect::<Vec<_>>()
    };
    let eval = |ps: &[Array]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.borrowed(p, false)).collect();
        let y = f(&mut g, &vars)?;
        let v = g.value(y).item();
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check objective is not finite".into()));
        }
        Ok(v)
    };
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for &(p, j) in coords {
        let orig = work[p].data()[j];
        work[p].data_mut()[j] = orig + eps;
        let up = eval(&work)?;
        work[p].data_mut()[j] = orig - eps;
        let down = eval(&work)?;
        work[p].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[p].data()[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
        Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn affine_identity_and_hand_sum() {
        let mut g = Graph::new();
        let x = g.constant(Array::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let w = g.constant(Array::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Array::zeros(&[2]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);

        let x = g.constant(Array::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(Array::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let b = g.constant(Array::new(vec![1], vec![1.0]).unwrap());
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xa = rand_array(&[3, 4], &mut rng);
        let wa = rand_array(&[4, 2], &mut rng);
        let ba = rand_array(&[2], &mut rng);
        let mut g = Graph::new();
        let x = g.borrowed(&xa, false);
        let w = g.borrowed(&wa, false);
        let b = g.borrowed(&ba, false);
        let y = g.affine(x, w, b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut want = ba.data()[j];
                for k in 0..4 {
                    want += xa.at(&[i, k]) * wa.at(&[k, j]);
                }
                assert!((g.value(y).at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_shape_error() {
        let mut g = Graph::new();
        let x = g.constant(Array::zeros(&[2, 3]));
        let w = g.constant(Array::zeros(&[4, 2]));
        let err = g.matmul(x, w).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let cases: [(Vec<f64>, Vec<f64>); 3] = [
            (vec![0.0, 0.0], vec![0.5, 0.5]),
            (vec![1000.0, 1000.0], vec![0.5, 0.5]),
            (vec![0.0, 3f64.ln()], vec![0.25, 0.75]),
        ];
        for (input, want) in cases {
            let x = g.constant(Array::new(vec![2], input).unwrap());
            let y = g.softmax(x).unwrap();
            for (a, b) in g.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let x = g.constant(Array::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gamma = g.constant(Array::full(&[2], 1.0));
        let beta = g.constant(Array::zeros(&[2]));
        let x = g.constant(Array::new(vec![2], vec![3.0, 3.0]).unwrap());
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));
        let x = g.constant(Array::new(vec![2], vec![1.0, -1.0]).unwrap());
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-5);
        assert!((g.value(y).data()[1] + 1.0).abs() < 1e-5);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gamma = g.constant(Array::full(&[16], 1.0));
        let beta = g.constant(Array::zeros(&[16]));
        let x = g.constant(rand_array(&[5, 16], &mut rng).map(|v| 3.0 * v + 2.0));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            // epsilon in the denominator shrinks variance slightly
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn depthwise_conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(Array::new(vec![1, 3, 1], vec![0.0, 3.0, 0.0]).unwrap());
        let k = g.constant(Array::full(&[3, 1], 1.0 / 3.0));
        let y = g.depthwise_conv1d(x, k).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let k = g.constant(Array::zeros(&[4, 1]));
        assert!(matches!(g.depthwise_conv1d(x, k), Err(Error::Config(_))));
    }

    #[test]
    fn depthwise_conv_delta_is_identity_and_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xa = rand_array(&[2, 9, 3], &mut rng);
        let mut delta = Array::zeros(&[5, 3]);
        for c in 0..3 {
            delta.set(&[2, c], 1.0);
        }
        let mut g = Graph::new();
        let x = g.borrowed(&xa, false);
        let k = g.constant(delta);
        let y = g.depthwise_conv1d(x, k).unwrap();
        assert_eq!(g.value(y), &xa);

        let ka = rand_array(&[5, 3], &mut rng);
        let k = g.borrowed(&ka, false);
        let y = g.depthwise_conv1d(x, k).unwrap();
        for b in 0..2 {
            for t in 0..9isize {
                for c in 0..3 {
                    let mut want = 0.0;
                    for kk in 0..5isize {
                        let s = t + kk - 2;
                        if (0..9).contains(&s) {
                            want += ka.at(&[kk as usize, c]) * xa.at(&[b, s as usize, c]);
                        }
                    }
                    assert!((g.value(y).at(&[b, t as usize, c]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let x = Array::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
        let mut g = Graph::new();
        let v = g.borrowed(&x, true);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let x = Array::new(vec![1], vec![f64::INFINITY]).unwrap();
        let r = grad_check(|g, v| Ok(g.sum(v[0])), &[x], 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = vec![
            rand_array(&[2, 4, 6], &mut rng), // x
            rand_array(&[6, 6], &mut rng),    // w
            rand_array(&[6], &mut rng),       // bias
            rand_array(&[3, 6], &mut rng),    // kernel
            rand_array(&[6], &mut rng),       // gamma
            rand_array(&[6], &mut rng),       // beta
            rand_array(&[5, 6], &mut rng),    // embedding table
            rand_array(&[6, 12], &mut rng),   // glu projection
            rand_array(&[18, 6], &mut rng),   // unfold projection
        ];
        let f = |g: &mut Graph<'_>, v: &[Var]| -> Result<Var> {
            let h = g.affine(v[0], v[1], v[2])?;
            let h = g.layer_norm(h, v[4], v[5])?;
            let h = g.silu(h);
            let h = g.depthwise_conv1d(h, v[3])?;
            let e = g.embedding(v[6], &[1, 4, 0, 2, 3, 3, 1, 0], &[2, 4])?;
            let h = g.add(h, e)?;
            let gl = g.matmul(h, v[7])?;
            let h = g.glu(gl)?;
            let u = g.unfold_time(h, 3, 2)?;
            let u = g.matmul(u, v[8])?;
            let q = g.reshape(u, &[2, 2, 2, 3])?;
            let q = g.permute(q, &[0, 2, 1, 3])?;
            let q = g.reshape(q, &[4, 2, 3])?;
            let s = g.bmm(q, q, true)?;
            let s = g.attn_mask(s, &[vec![true, true], vec![true, false]], true)?;
            let p = g.softmax(s)?;
            let o = g.bmm(p, q, false)?;
            let pos = g.reshape(o, &[2, 4, 3])?;
            let shifted = g.unfold_time(pos, 3, 1)?;
            let m = g.masked_mean_time(shifted, &[4, 2])?;
            let lp = g.log_softmax(m)?;
            let sc = g.scale(lp, 0.7);
            let prod = g.mul(sc, m)?;
            let rs = g.reshape(h, &[8, 2, 3])?;
            let rs = g.rel_shift(rs)?;
            let s1 = g.sum(prod);
            let s2 = g.sum(rs);
            let ce = g.cross_entropy(m, &[3, 7], &[0.5, 0.5], 0.1)?;
            g.weighted_sum(&[(s1, 1.0), (s2, 0.3), (ce, 2.0)])
        };
        let err = grad_check(f, &params, 1e-5).unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xa = rand_array(&[2, 3, 4], &mut rng);
        let mut g = Graph::new();
        let x = g.borrowed(&xa, false);
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        assert_eq!(g.value(y).at(&[3, 1, 2]), xa.at(&[1, 2, 3]));
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z), &xa);
    }
}
