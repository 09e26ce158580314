use crate::error::{invalid, mismatch, Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum MatMulKind {
    /// `[.., m, k] x [k, n]`, leading axes folded into `m`.
    Flat { m: usize, k: usize, n: usize },
    /// `[.., m, k] x [.., k, n]` with identical leading axes.
    Batched {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var, MatMulKind),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Gather(Var, usize, Vec<usize>),
    Narrow(Var, usize, usize),
    Mse(Var, Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b, _) | Mse(a, b) => vec![*a, *b],
            Scale(a, _) | Offset(a) | Softmax(a) | LogSoftmax(a) | Gelu(a) | Silu(a) | Sum(a)
            | Mean(a) | SumAxis(a, _) | MeanAxis(a, _) | Permute(a, _) | Reshape(a)
            | Gather(a, _, _) | Narrow(a, _, _) => vec![*a],
            LayerNorm { x, .. } => vec![*x],
            Conv1d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut p = vec![*input, *weight];
                p.extend(bias);
                p
            }
            Concat(parts, _) => parts.clone(),
        }
    }
}

fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
    let n = nodes[v.0].value.numel();
    adj[v.0].get_or_insert_with(|| vec![0.0; n])
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Summary of one reverse sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardReport {
    pub nodes_visited: usize,
    pub nodes_total: usize,
}

/// Linear record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's parents precede
/// it. Leaves created with [`Tape::leaf`] accumulate gradients across
/// [`Tape::backward`] calls until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// A leaf that receives gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has been propagated to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records an op node if any parent needs gradient, a constant otherwise.
    fn record(&mut self, value: Tensor, op: Op) -> Var {
        if op.parents().iter().any(|p| self.nodes[p.0].requires_grad) {
            self.push(value, op, true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, f);
        }
        let out = kernels::broadcast_shape(op, ta.shape(), tb.shape())?;
        let sa = kernels::broadcast_strides(ta.shape(), &out);
        let sb = kernels::broadcast_strides(tb.shape(), &out);
        let (da, db) = (ta.data(), tb.data());
        let mut data = vec![0.0; out.iter().product()];
        kernels::for_each2(&out, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
        Tensor::new(out, data)
    }

    /// Element-wise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.record(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.record(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.record(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.record(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.record(v, Op::Offset(a))
    }

    /// Matrix product. Accepts `[.., m, k] x [k, n]` (weight shared across
    /// leading axes) or `[.., m, k] x [.., k, n]` with equal leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ra = sa.len();
        let kind = if ra >= 2 && sb.len() == 2 && sa[ra - 1] == sb[0] {
            MatMulKind::Flat {
                m: sa[..ra - 1].iter().product(),
                k: sb[0],
                n: sb[1],
            }
        } else if ra >= 3 && sb.len() == ra && sa[..ra - 2] == sb[..ra - 2] && sa[ra - 1] == sb[ra - 2]
        {
            MatMulKind::Batched {
                batch: sa[..ra - 2].iter().product(),
                m: sa[ra - 2],
                k: sa[ra - 1],
                n: sb[ra - 1],
            }
        } else {
            return mismatch("matmul", &sa, &sb);
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut shape = sa[..ra - 1].to_vec();
        shape.push(*sb.last().unwrap());
        let mut out = vec![0.0; shape.iter().product()];
        match kind {
            MatMulKind::Flat { m, k, n } => kernels::gemm(m, k, n, da, k, 1, db, n, 1, &mut out, 0.0),
            MatMulKind::Batched { batch, m, k, n } => {
                for i in 0..batch {
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &da[i * m * k..],
                        k,
                        1,
                        &db[i * k * n..],
                        n,
                        1,
                        &mut out[i * m * n..],
                        0.0,
                    );
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.record(v, Op::MatMul(a, b, kind)))
    }

    fn conv_geometry(
        &self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Result<(ConvGeometry, usize)> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        let (batch, c_in, len) = match *si {
            [c, l] => (1, c, l),
            [b, c, l] => (b, c, l),
            _ => return invalid("conv1d", format!("input must be [C, L] or [B, C, L], got {si:?}")),
        };
        let [c_out, wc_in, kernel] = *sw else {
            return invalid("conv1d", format!("weight must be [C_out, C_in, K], got {sw:?}"));
        };
        if wc_in != c_in || kernel == 0 || len + 2 * padding < kernel {
            return mismatch("conv1d", si, sw);
        }
        if stride == 0 {
            return invalid("conv1d", "stride must be positive");
        }
        let out_len = (len + 2 * padding - kernel) / stride + 1;
        Ok((
            ConvGeometry {
                batch,
                c_in,
                len,
                kernel,
                stride,
                padding,
                out_len,
            },
            c_out,
        ))
    }

    /// 1-D cross-correlation. `input` is `[C_in, L]` or `[B, C_in, L]`,
    /// `weight` is `[C_out, C_in, K]`, `bias` is `[C_out]`. Output length is
    /// `(L + 2·padding − K) / stride + 1`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (geo, c_out) = self.conv_geometry(input, weight, stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return mismatch("conv1d", self.shape(weight), self.shape(b));
            }
        }
        let cols = geo.im2col(self.value(input).data());
        let rows = geo.batch * geo.out_len;
        let width = geo.col_width();
        let mut mat = vec![0.0; rows * c_out];
        kernels::gemm(
            rows,
            width,
            c_out,
            &cols,
            width,
            1,
            self.value(weight).data(),
            1,
            width,
            &mut mat,
            0.0,
        );
        let bias_data = bias.map(|b| self.value(b).data());
        let mut out = vec![0.0; rows * c_out];
        for b in 0..geo.batch {
            for co in 0..c_out {
                let shift = bias_data.map_or(0.0, |d| d[co]);
                for l in 0..geo.out_len {
                    out[(b * c_out + co) * geo.out_len + l] =
                        mat[(b * geo.out_len + l) * c_out + co] + shift;
                }
            }
        }
        let shape = if self.shape(input).len() == 2 {
            vec![c_out, geo.out_len]
        } else {
            vec![geo.batch, c_out, geo.out_len]
        };
        let v = Tensor::new(shape, out)?;
        Ok(self.record(
            v,
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Normalizes over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let Some(&d) = t.shape().last() else {
            return invalid("layer_norm", "scalar input");
        };
        let rows = t.numel() / d.max(1);
        let mut out = vec![0.0; t.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for (src, dst) in t.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, s) in dst.iter_mut().zip(src) {
                *o = (s - mean) * r;
            }
            rstd.push(r);
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.record(v, Op::LayerNorm { x, rstd }))
    }

    fn last_axis_rows(&self, op: &'static str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => invalid(op, format!("needs a non-empty last axis, got {:?}", self.shape(x))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.last_axis_rows("softmax", x)?;
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            row.iter_mut().for_each(|e| *e /= total);
        }
        Ok(self.record(v, Op::Softmax(x)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.last_axis_rows("log_softmax", x)?;
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|e| *e -= lse);
        }
        Ok(self.record(v, Op::LogSoftmax(x)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::gelu);
        self.record(v, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * kernels::sigmoid(e));
        self.record(v, Op::Silu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.record(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.numel().max(1) as f64);
        self.record(v, Op::Mean(x))
    }

    fn reduce_axis(&self, op: &'static str, x: Var, axis: usize, scale_by_len: bool) -> Result<Tensor> {
        let t = self.value(x);
        if axis >= t.rank() {
            return invalid(op, format!("axis {axis} out of range for {:?}", t.shape()));
        }
        let (outer, n, inner) = kernels::axis_blocks(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for j in 0..n {
                let src = &d[(o * n + j) * inner..][..inner];
                for (acc, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *acc += s;
                }
            }
        }
        if scale_by_len && n > 0 {
            out.iter_mut().for_each(|e| *e /= n as f64);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.reduce_axis("sum_axis", x, axis, false)?;
        Ok(self.record(v, Op::SumAxis(x, axis)))
    }

    /// Mean over `axis`, dropping it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.reduce_axis("mean_axis", x, axis, true)?;
        Ok(self.record(v, Op::MeanAxis(x, axis)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return invalid("permute", format!("axes {axes:?} are not a permutation for {shape:?}"));
        }
        let map = kernels::permute_indices(&shape, axes);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let v = Tensor::new(out, data)?;
        Ok(self.record(v, Op::Permute(x, axes.to_vec())))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a >= rank || b >= rank {
            return invalid("transpose", format!("axes ({a}, {b}) out of range for rank {rank}"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.record(v, Op::Reshape(x)))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid("concat", "nothing to concatenate");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return invalid("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return mismatch("concat", &base, s);
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_blocks(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..][..block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        Ok(self.record(v, Op::Concat(parts.to_vec(), axis)))
    }

    /// Selects `indices` along `axis` (indices may repeat).
    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return invalid("gather", format!("axis {axis} out of range for {:?}", t.shape()));
        }
        let (outer, n, inner) = kernels::axis_blocks(t.shape(), axis);
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return invalid("gather", format!("index {bad} out of range for extent {n}"));
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                data.extend_from_slice(&t.data()[(o * n + i) * inner..][..inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = indices.len();
        let v = Tensor::new(shape, data)?;
        Ok(self.record(v, Op::Gather(x, axis, indices.to_vec())))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} out of bounds for {:?}", start + len, t.shape()),
            );
        }
        let (outer, n, inner) = kernels::axis_blocks(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[(o * n + start) * inner..][..len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(shape, data)?;
        Ok(self.record(v, Op::Narrow(x, axis, start)))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return mismatch("mse", ta.shape(), tb.shape());
        }
        let n = ta.numel().max(1) as f64;
        let s = kernels::compensated_sum(ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)));
        Ok(self.record(Tensor::scalar(s / n), Op::Mse(a, b)))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            visited += 1;
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        for (i, a) in adj.into_iter().enumerate() {
            let node = &self.nodes[i];
            if let (Some(a), true, Op::Leaf) = (a, node.requires_grad, &node.op) {
                match &mut self.grads[i] {
                    Some(g) => g.iter_mut().zip(&a).for_each(|(x, y)| *x += y),
                    slot => *slot = Some(a),
                }
            }
        }
        Ok(BackwardReport {
            nodes_visited: visited,
            nodes_total: loss.0 + 1,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(&self.nodes, adj, $v)
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !wants(v) {
                        continue;
                    }
                    let shape = val(v).shape().to_vec();
                    let ga = acc!(v);
                    if shape == out.shape() {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                    } else {
                        let st = kernels::broadcast_strides(&shape, out.shape());
                        let zero = vec![0; st.len()];
                        kernels::for_each2(out.shape(), &st, &zero, |o, j, _| ga[j] += s * g[o]);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let sa = kernels::broadcast_strides(ta.shape(), out.shape());
                let sb = kernels::broadcast_strides(tb.shape(), out.shape());
                if wants(*a) {
                    let ga = acc!(*a);
                    let db = tb.data();
                    kernels::for_each2(out.shape(), &sa, &sb, |o, ia, ib| ga[ia] += g[o] * db[ib]);
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    let da = ta.data();
                    kernels::for_each2(out.shape(), &sa, &sb, |o, ia, ib| gb[ib] += g[o] * da[ia]);
                }
            }
            Op::Scale(a, c) => {
                acc!(*a).iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            Op::Offset(a) | Op::Reshape(a) => {
                acc!(*a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::MatMul(a, b, kind) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                let (batch, m, k, n, shared) = match *kind {
                    MatMulKind::Flat { m, k, n } => (1, m, k, n, true),
                    MatMulKind::Batched { batch, m, k, n } => (batch, m, k, n, false),
                };
                if wants(*a) {
                    let ga = acc!(*a);
                    for bi in 0..batch {
                        let boff = if shared { 0 } else { bi * k * n };
                        // dA = dC · Bᵀ
                        kernels::gemm(m, n, k, &g[bi * m * n..], n, 1, &db[boff..], 1, n, &mut ga[bi * m * k..], 1.0);
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    for bi in 0..batch {
                        let boff = if shared { 0 } else { bi * k * n };
                        // dB = Aᵀ · dC
                        kernels::gemm(k, m, n, &da[bi * m * k..], 1, k, &g[bi * m * n..], n, 1, &mut gb[boff..], 1.0);
                    }
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (geo, c_out) = self
                    .conv_geometry(*input, *weight, *stride, *padding)
                    .expect("geometry validated in forward");
                let rows = geo.batch * geo.out_len;
                let width = geo.col_width();
                let mut gmat = vec![0.0; rows * c_out];
                for b in 0..geo.batch {
                    for co in 0..c_out {
                        for l in 0..geo.out_len {
                            gmat[(b * geo.out_len + l) * c_out + co] = g[(b * c_out + co) * geo.out_len + l];
                        }
                    }
                }
                if let Some(bv) = bias.filter(|&b| wants(b)) {
                    let gb = acc!(bv);
                    for row in gmat.chunks(c_out) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
                if wants(*weight) {
                    let cols = geo.im2col(val(*input).data());
                    let gw = acc!(*weight);
                    kernels::gemm(c_out, rows, width, &gmat, 1, c_out, &cols, width, 1, gw, 1.0);
                }
                if wants(*input) {
                    let mut dcols = vec![0.0; rows * width];
                    kernels::gemm(rows, c_out, width, &gmat, c_out, 1, val(*weight).data(), width, 1, &mut dcols, 0.0);
                    geo.col2im(&dcols, acc!(*input));
                }
            }
            Op::LayerNorm { x, rstd } => {
                let d = *out.shape().last().unwrap();
                let gx = acc!(*x);
                for (r, ((y, gr), dst)) in out.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dst[j] += rstd[r] * (gr[j] - mg - y[j] * mgy);
                    }
                }
            }
            Op::Softmax(x) => {
                let d = *out.shape().last().unwrap();
                let gx = acc!(*x);
                for ((y, gr), dst) in out.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dst[j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let d = *out.shape().last().unwrap();
                let gx = acc!(*x);
                for ((y, gr), dst) in out.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..d {
                        dst[j] += gr[j] - y[j].exp() * total;
                    }
                }
            }
            Op::Gelu(x) => {
                let src = val(*x).data();
                let gx = acc!(*x);
                for j in 0..g.len() {
                    gx[j] += g[j] * kernels::gelu_grad(src[j]);
                }
            }
            Op::Silu(x) => {
                let src = val(*x).data();
                let gx = acc!(*x);
                for j in 0..g.len() {
                    let s = kernels::sigmoid(src[j]);
                    gx[j] += g[j] * s * (1.0 + src[j] * (1.0 - s));
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = val(*x).numel();
                let c = if matches!(self.nodes[i].op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                acc!(*x).iter_mut().for_each(|e| *e += c);
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (outer, n, inner) = kernels::axis_blocks(val(*x).shape(), *axis);
                let c = if matches!(self.nodes[i].op, Op::MeanAxis(..)) { 1.0 / n as f64 } else { 1.0 };
                let gx = acc!(*x);
                for o in 0..outer {
                    for j in 0..n {
                        let dst = &mut gx[(o * n + j) * inner..][..inner];
                        dst.iter_mut().zip(&g[o * inner..][..inner]).for_each(|(a, b)| *a += c * b);
                    }
                }
            }
            Op::Permute(x, axes) => {
                let map = kernels::permute_indices(val(*x).shape(), axes);
                let gx = acc!(*x);
                for (o, &src) in map.iter().enumerate() {
                    gx[src] += g[o];
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = kernels::axis_blocks(out.shape(), *axis);
                let mut offset = 0;
                let total = out.shape()[*axis] * inner;
                for &p in parts {
                    let block = val(p).shape()[*axis] * inner;
                    if wants(p) {
                        let gp = acc!(p);
                        for o in 0..outer {
                            let src = &g[o * total + offset..][..block];
                            gp[o * block..][..block].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += block;
                }
            }
            Op::Gather(x, axis, indices) => {
                let (outer, n, inner) = kernels::axis_blocks(val(*x).shape(), *axis);
                let gx = acc!(*x);
                let k = indices.len();
                for o in 0..outer {
                    for (j, &src) in indices.iter().enumerate() {
                        let dst = &mut gx[(o * n + src) * inner..][..inner];
                        dst.iter_mut().zip(&g[(o * k + j) * inner..][..inner]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Narrow(x, axis, start) => {
                let (outer, n, inner) = kernels::axis_blocks(val(*x).shape(), *axis);
                let len = out.shape()[*axis];
                let gx = acc!(*x);
                for o in 0..outer {
                    let dst = &mut gx[(o * n + start) * inner..][..len * inner];
                    dst.iter_mut().zip(&g[o * len * inner..][..len * inner]).for_each(|(a, b)| *a += b);
                }
            }
            Op::Mse(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                let c = 2.0 * g[0] / da.len().max(1) as f64;
                if wants(*a) {
                    let ga = acc!(*a);
                    for j in 0..da.len() {
                        ga[j] += c * (da[j] - db[j]);
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    for j in 0..da.len() {
                        gb[j] -= c * (da[j] - db[j]);
                    }
                }
            }
        }
    }
}
