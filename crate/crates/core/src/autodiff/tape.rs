use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    MeanPool {
        x: Var,
        axis: usize,
        mask: Vec<bool>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat(Vec<Var>),
    Sum(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.grads
    }

    /// Adds `alpha * other` into `self`; names missing from `self` are inserted.
    pub fn accumulate(&mut self, alpha: f64, other: &Gradients) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => acc.axpy(alpha, g)?,
                None => {
                    self.grads.insert(name.clone(), g.map(|v| alpha * v));
                }
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

/// Dynamic computation record. Every operation evaluates eagerly and pushes a
/// node; [`Tape::backward`] walks the nodes in reverse insertion order, which
/// is a valid reverse topological order by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with `src_shape`) into the layout given by `perm`.
fn permute_data(src: &[f64], src_shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let src_strides = strides(src_shape);
    let mapped: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&mapped).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output-time index range `t` for which `t*stride + k - padding` is inside `[0, len_in)`.
fn conv_valid_range(k: usize, stride: usize, padding: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let hi_num = len_in as isize - 1 + padding as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(len_out);
    (lo.min(hi), hi)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.into(), v));
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.ends_with(sb) {
            Ok((a, b))
        } else if sb.ends_with(sa) {
            Ok((b, a))
        } else {
            Err(mismatch(op, sa, sb))
        }
    }

    /// Elementwise sum; the smaller operand may broadcast over leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.numel().max(1);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb.data()[i % nb])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.numel().max(1);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * vb.data()[i % nb])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| k * x);
        self.push("scale", out, Op::Scale(a, k), &[a])
    }

    /// `a[..., m, k] · b[k, n] -> [..., m, n]`; leading dims of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a[B, m, k] · b[B, k, n] -> [B, m, n]`
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("batch_matmul", &sa, &sb));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bsz {
            gemm(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::new(vec![bsz, m, n], out)?;
        self.push("batch_matmul", out, Op::BatchMatMul(a, b), &[a, b])
    }

    /// 1-D convolution (cross-correlation) of `x[N, C_in, L]` with
    /// `w[C_out, C_in, K]` and optional bias `b[C_out]`, zero padded.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(mismatch("conv1d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d stride", "must be >= 1"));
        }
        let (n, cin, len_in) = (sx[0], sx[1], sx[2]);
        let (cout, ksize) = (sw[0], sw[2]);
        if len_in + 2 * padding < ksize {
            return Err(mismatch("conv1d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv1d bias", self.shape(b), &[cout]));
            }
        }
        let len_out = (len_in + 2 * padding - ksize) / stride + 1;
        let mut out = vec![0.0; n * cout * len_out];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for s in 0..n {
            for co in 0..cout {
                let orow = &mut out[(s * cout + co) * len_out..(s * cout + co + 1) * len_out];
                if let Some(b) = b {
                    let bias = self.nodes[b.0].value.data()[co];
                    orow.iter_mut().for_each(|o| *o = bias);
                }
                for ci in 0..cin {
                    let xrow = &xd[(s * cin + ci) * len_in..(s * cin + ci + 1) * len_in];
                    for k in 0..ksize {
                        let wv = wd[(co * cin + ci) * ksize + k];
                        let (lo, hi) = conv_valid_range(k, stride, padding, len_in, len_out);
                        for (t, o) in orow.iter_mut().enumerate().take(hi).skip(lo) {
                            *o += wv * xrow[t * stride + k - padding];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, cout, len_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv1d",
            out,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| mismatch("layer_norm", &sx, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", &sx, self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(sx, out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax along `axis` where positions with `mask[i] == false` receive
    /// exactly zero probability. The mask applies to every slice along `axis`.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: &[bool]) -> Result<Var> {
        self.softmax_impl(x, axis, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::invalid("softmax axis", format!("{axis} out of range for {sx:?}")));
        }
        let (outer, len, inner) = axis_extents(&sx, axis);
        if let Some(m) = mask {
            if m.len() != len {
                return Err(mismatch("masked_softmax", &sx, &[m.len()]));
            }
            if !m.iter().any(|&v| v) {
                return Err(Error::invalid("softmax mask", "no valid positions"));
            }
        }
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * len + i) * inner + r;
                let max = (0..len)
                    .filter(|&i| keep(i))
                    .map(|i| xd[at(i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in (0..len).filter(|&i| keep(i)) {
                    let e = (xd[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in (0..len).filter(|&i| keep(i)) {
                    out[at(i)] /= total;
                }
            }
        }
        let out = Tensor::new(sx, out)?;
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    /// Mean over `axis`, restricted to positions where `mask` is true (all
    /// positions when `mask` is `None`). The axis is removed from the shape.
    pub fn mean_pool(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::invalid("mean_pool axis", format!("{axis} out of range for {sx:?}")));
        }
        let (outer, len, inner) = axis_extents(&sx, axis);
        let mask = match mask {
            Some(m) if m.len() != len => return Err(mismatch("mean_pool", &sx, &[m.len()])),
            Some(m) => m.to_vec(),
            None => vec![true; len],
        };
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("mean_pool mask", "no valid positions"));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in (0..len).filter(|&i| mask[i]) {
                for r in 0..inner {
                    out[o * inner + r] += xd[(o * len + i) * inner + r];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= count as f64);
        let mut shape = sx;
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        self.push("mean_pool", out, Op::MeanPool { x, axis, mask }, &[x])
    }

    /// Row lookup: `table[V, D]` indexed by `indices` gives `[indices.len(), D]`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(mismatch("embedding_lookup", &st, &[indices.len()]));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "embedding index",
                format!("{bad} out of range for table with {rows} rows"),
            ));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], out)?;
        self.push(
            "embedding_lookup",
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// General axis permutation; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(mismatch("permute", &sx, perm));
        }
        let (shape, data) = permute_data(self.value(x).data(), &sx, perm);
        let out = Tensor::new(shape, data)?;
        self.push(
            "permute",
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(mismatch("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(mismatch("concat", self.shape(*first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    /// Mean binary cross-entropy between `logits` and `targets`, evaluated as
    /// `max(x,0) - x*y + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let xs = self.value(logits).data();
        if xs.len() != targets.len() || xs.is_empty() {
            return Err(mismatch("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let loss = crate::training::bce_with_logits(xs, targets);
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`. Every registered parameter gets an
    /// entry; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "loss",
                format!("backward needs a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
            match out.get_mut(name) {
                // the same parameter registered twice: contributions add up
                Some(acc) => Tensor::axpy(acc, 1.0, &g)?,
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                let vb = self.value(*b);
                let nb = vb.numel();
                let mut gb = vec![0.0; nb];
                for (i, v) in gd.iter().enumerate() {
                    gb[i % nb] += v;
                }
                self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?)?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let nb = vb.numel();
                let ga = gd
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * vb.data()[i % nb])
                    .collect();
                let mut gb = vec![0.0; nb];
                for (i, v) in gd.iter().enumerate() {
                    gb[i % nb] += v * va.data()[i];
                }
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?)?;
                self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?)?;
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, g.map(|v| k * v))?;
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.numel() / k.max(1);
                let mut ga = vec![0.0; m * k];
                gemm_nt(gd, vb.data(), m, k, n, &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm_tn(va.data(), gd, m, k, n, &mut gb);
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?)?;
                self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?)?;
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bsz, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                let mut ga = vec![0.0; bsz * m * k];
                let mut gb = vec![0.0; bsz * k * n];
                for i in 0..bsz {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    gemm_nt(gi, &vb.data()[i * k * n..(i + 1) * k * n], m, k, n, &mut ga[i * m * k..(i + 1) * m * k]);
                    gemm_tn(&va.data()[i * m * k..(i + 1) * m * k], gi, m, k, n, &mut gb[i * k * n..(i + 1) * k * n]);
                }
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?)?;
                self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?)?;
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, cin, len_in) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (cout, ksize) = (vw.shape()[0], vw.shape()[2]);
                let len_out = g.shape()[2];
                let mut gx = vec![0.0; vx.numel()];
                let mut gw = vec![0.0; vw.numel()];
                let mut gb = vec![0.0; cout];
                for s in 0..n {
                    for co in 0..cout {
                        let grow = &gd[(s * cout + co) * len_out..(s * cout + co + 1) * len_out];
                        gb[co] += grow.iter().sum::<f64>();
                        for ci in 0..cin {
                            let base = (s * cin + ci) * len_in;
                            let xrow = &vx.data()[base..base + len_in];
                            for k in 0..ksize {
                                let widx = (co * cin + ci) * ksize + k;
                                let wv = vw.data()[widx];
                                let (lo, hi) = conv_valid_range(k, *stride, *padding, len_in, len_out);
                                let mut acc = 0.0;
                                for (t, &gv) in grow.iter().enumerate().take(hi).skip(lo) {
                                    let j = t * stride + k - padding;
                                    acc += gv * xrow[j];
                                    gx[base + j] += gv * wv;
                                }
                                gw[widx] += acc;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx)?)?;
                self.accumulate(grads, *w, Tensor::new(vw.shape().to_vec(), gw)?)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::new(vec![cout], gb)?)?;
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let ga = gd
                    .iter()
                    .zip(va.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?)?;
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let ga = gd.iter().zip(va.data()).map(|(g, &x)| g * gelu_grad(x)).collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let rows = inv_std.len();
                let mut gx = vec![0.0; gd.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let (mut sum_dh, mut sum_dh_h) = (0.0, 0.0);
                    for j in 0..d {
                        let i = r * d + j;
                        let dh = gd[i] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[i];
                        gg[j] += gd[i] * xhat[i];
                        gbeta[j] += gd[i];
                    }
                    for j in 0..d {
                        let i = r * d + j;
                        let dh = gd[i] * gam[j];
                        gx[i] = inv_std[r] * (dh - sum_dh / d as f64 - xhat[i] * sum_dh_h / d as f64);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx)?)?;
                self.accumulate(grads, *gamma, Tensor::new(vec![d], gg)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![d], gbeta)?)?;
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + r;
                        let dot: f64 = (0..len).map(|i| y[at(i)] * gd[at(i)]).sum();
                        for i in 0..len {
                            gx[at(i)] = y[at(i)] * (gd[at(i)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), gx)?)?;
            }
            Op::MeanPool { x, axis, mask } => {
                let sx = self.shape(*x).to_vec();
                let (outer, len, inner) = axis_extents(&sx, *axis);
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in (0..len).filter(|&i| mask[i]) {
                        for r in 0..inner {
                            gx[(o * len + i) * inner + r] = gd[o * inner + r] / count;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(sx, gx)?)?;
            }
            Op::Gather { table, indices } => {
                let st = self.shape(*table).to_vec();
                let d = st[1];
                let mut gt = vec![0.0; st[0] * d];
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += gd[row * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(st, gt)?)?;
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape)?)?;
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (shape, data) = permute_data(gd, g.shape(), &inverse);
                self.accumulate(grads, *x, Tensor::new(shape, data)?)?;
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p).to_vec();
                    let n: usize = s.iter().product();
                    let part = Tensor::new(s, gd[offset..offset + n].to_vec())?;
                    offset += n;
                    self.accumulate(grads, p, part)?;
                }
            }
            Op::Sum(x) => {
                let up = gd[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), up))?;
            }
            Op::BceWithLogits { logits, targets } => {
                let up = gd[0];
                let xs = self.value(*logits);
                let k = targets.len() as f64;
                let gl = xs
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| up * (crate::training::sigmoid(x) - y) / k)
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(xs.shape().to_vec(), gl)?)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[3, 4]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        assert!(tape.value(c).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[4, 4]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 4]"), "{msg}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_puts_no_mass_on_masked() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 5.0]));
        let y = tape.masked_softmax(x, 1, &[true, true, false]).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
        assert!(tape.masked_softmax(x, 1, &[false; 3]).is_err());
    }

    #[test]
    fn conv1d_same_padding_keeps_length() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 10]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3]));
        let y = tape.conv1d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 10]);
        let v = tape.value(y).data();
        assert_eq!(v[0], 2.0);
        assert_eq!(v[5], 3.0);
        assert_eq!(v[9], 2.0);
    }

    #[test]
    fn conv1d_strided_length() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 3, 96]));
        let w = tape.constant(Tensor::ones(&[4, 3, 7]));
        let y = tape.conv1d(x, w, None, 2, 3).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 48]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::from_vec(vec![1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreached_parameter_gets_zero() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::from_vec(vec![1.0, 2.0]));
        let _p = tape.param("p", Tensor::from_vec(vec![5.0, 6.0, 7.0]));
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::from_vec(vec![1.0, 2.0]));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn trailing_broadcast_only() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[3]));
        let c = tape.constant(Tensor::ones(&[2]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.shape(s).to_vec(), vec![2, 3]);
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn permute_roundtrip_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.transpose(x).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1e308]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite(_))));
    }
}
