//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse.
//! Parameters enter the tape borrowed, so binding a model costs no copies.

use std::borrow::Cow;

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Graph::apply`].
#[derive(Clone, Debug)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Softmax,
    LayerNorm,
    Sigmoid,
    Tanh,
    Relu,
    EmbeddingLookup { ids: Vec<usize> },
    CrossEntropy { targets: Vec<Option<usize>>, smoothing: f64 },
    CumulativeMean,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Relu { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, smoothing: f64, probs: Vec<f64> },
    CumulativeMean { x: Var },
    Sum { x: Var },
    Pick { x: Var, index: Vec<usize> },
    SegmentSum { x: Var, lens: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn permute_data(src: &Tensor, perm: &[usize]) -> Tensor {
    let shape = src.shape();
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n = src.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let s = src.data();
    for _ in 0..n {
        data.push(s[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permute preserves size")
}

/// Numerically stable `log(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
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

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Owned leaf; `requires_grad` decides whether backward reports a gradient for it.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(name.to_string()));
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Cow::Owned(value), op, needs_grad))
    }

    /// Generic entry point mirroring the named methods.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let arg = |i: usize| {
            inputs
                .get(i)
                .copied()
                .ok_or_else(|| Error::Shape(format!("missing operand {i}")))
        };
        match op {
            OpKind::MatMul => self.matmul(arg(0)?, arg(1)?),
            OpKind::Add => self.add(arg(0)?, arg(1)?),
            OpKind::Mul => self.mul(arg(0)?, arg(1)?),
            OpKind::Concat { axis } => self.concat(inputs, axis),
            OpKind::Slice { axis, start, end } => self.slice(arg(0)?, axis, start, end),
            OpKind::Softmax => self.softmax(arg(0)?),
            OpKind::LayerNorm => self.layer_norm(arg(0)?, arg(1)?, arg(2)?),
            OpKind::Sigmoid => self.sigmoid(arg(0)?),
            OpKind::Tanh => self.tanh(arg(0)?),
            OpKind::Relu => self.relu(arg(0)?),
            OpKind::EmbeddingLookup { ids } => self.embedding(arg(0)?, &ids),
            OpKind::CrossEntropy { targets, smoothing } => {
                self.cross_entropy(arg(0)?, &targets, smoothing)
            }
            OpKind::CumulativeMean => self.cumulative_mean(arg(0)?),
        }
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() != 2 || ta.rank() < 1 || ta.last_dim() != tb.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let k = tb.shape()[0];
        let n = tb.shape()[1];
        let m = ta.len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.record("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    /// Batched product `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` with `b[B, n, k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bad = || Error::Shape(format!("batch_matmul {:?} x {:?}", ta.shape(), tb.shape()));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.record("batch_matmul", value, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    fn check_suffix(&self, name: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!("{name} {sa:?} with {sb:?}")));
        }
        Ok(())
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add", a, b)?;
        let mut value = self.value(a).clone();
        let tb = self.value(b).data();
        let m = tb.len();
        for chunk in value.data_mut().chunks_mut(m.max(1)) {
            for (x, y) in chunk.iter_mut().zip(tb) {
                *x += y;
            }
        }
        self.record("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// Elementwise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul", a, b)?;
        let mut value = self.value(a).clone();
        let tb = self.value(b).data();
        let m = tb.len();
        for chunk in value.data_mut().chunks_mut(m.max(1)) {
            for (x, y) in chunk.iter_mut().zip(tb) {
                *x *= y;
            }
        }
        self.record("mul", value, Op::Mul { a, b }, &[a, b])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = scale * *v + shift;
        }
        self.record("affine", value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} on {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::Shape(format!("concat {base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let width = t.shape()[axis] * inner;
            for o in 0..outer {
                let dst = o * total * inner + offset;
                data[dst..dst + width].copy_from_slice(&t.data()[o * width..(o + 1) * width]);
            }
            offset += width;
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.record("concat", value, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let width = (end - start) * inner;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let value = Tensor::new(out_shape, data)?;
        self.record("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.record("reshape", value, Op::Reshape { x }, &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("bad permutation {perm:?} for rank {rank}")));
        }
        let value = permute_data(self.value(x), perm);
        self.record("permute", value, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        let d = value.last_dim();
        for row in value.data_mut().chunks_mut(d.max(1)) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        self.record("softmax", value, Op::Softmax { x }, &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        let d = value.last_dim();
        for row in value.data_mut().chunks_mut(d.max(1)) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.record("log_softmax", value, Op::LogSoftmax { x }, &[x])
    }

    /// Layer normalisation over the last axis followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-9;
        let t = self.value(x);
        let d = t.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm over {d} features with gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = t.len() / d.max(1);
        let mut xhat = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % d] + b[i % d])
            .collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.record(
            "layer_norm",
            value,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            &[x, gain, bias],
        )
    }

    fn map(&mut self, name: &str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = f(*v);
        }
        self.record(name, value, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu { x })
    }

    /// Rows of `table[V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape(format!("embedding table {:?}", t.shape())));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocab { id, size: v });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.record("embedding", value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Summed token cross-entropy of `logits[N, V]`; `None` targets are padding.
    ///
    /// With smoothing `eps` the target distribution is `(1 - eps) * onehot + eps / V`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], smoothing: f64) -> Result<Var> {
        let t = self.value(logits);
        let v = t.last_dim();
        let n = t.len() / v.max(1);
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy over {n} rows with {} targets",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; t.len()];
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let Some(y) = *target else { continue };
            if y >= v {
                return Err(Error::Vocab { id: y, size: v });
            }
            let row = t.row(i);
            let lse = log_sum_exp(row);
            let mean: f64 = row.iter().sum::<f64>() / v as f64;
            total += lse - (1.0 - smoothing) * row[y] - smoothing * mean;
            for (p, x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        self.record(
            "cross_entropy",
            Tensor::scalar(total),
            Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing, probs },
            &[logits],
        )
    }

    /// Running mean along the second-to-last (time) axis of `[.., T, d]`.
    pub fn cumulative_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(Error::Shape(format!("cumulative_mean on {:?}", t.shape())));
        }
        let r = t.rank();
        let (steps, d) = (t.shape()[r - 2], t.shape()[r - 1]);
        let mut value = t.clone();
        for block in value.data_mut().chunks_mut((steps * d).max(1)) {
            let mut acc = vec![0.0; d];
            for s in 0..steps {
                let row = &mut block[s * d..(s + 1) * d];
                for (a, v) in acc.iter_mut().zip(row.iter_mut()) {
                    *a += *v;
                    *v = *a / (s + 1) as f64;
                }
            }
        }
        self.record("cumulative_mean", value, Op::CumulativeMean { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.record("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// `out[i] = x[i, index[i]]` for `x` viewed as `[N, d]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let n = t.len() / d.max(1);
        if index.len() != n || index.iter().any(|&i| i >= d) {
            return Err(Error::Shape(format!("pick {} indices from {:?}", index.len(), t.shape())));
        }
        let data = index.iter().enumerate().map(|(i, &j)| t.data()[i * d + j]).collect();
        self.record("pick", Tensor::vector(data), Op::Pick { x, index: index.to_vec() }, &[x])
    }

    /// Sums consecutive runs of a vector: `lens` partitions `x[N]` into segments.
    pub fn segment_sum(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || lens.iter().sum::<usize>() != t.len() {
            return Err(Error::Shape(format!("segment_sum {lens:?} over {:?}", t.shape())));
        }
        let mut data = Vec::with_capacity(lens.len());
        let mut at = 0;
        for &l in lens {
            data.push(t.data()[at..at + l].iter().sum());
            at += l;
        }
        self.record("segment_sum", Tensor::vector(data), Op::SegmentSum { x, lens: lens.to_vec() }, &[x])
    }

    /// Gathers along the first axis (rows may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let value = self.value(x).select_rows(rows)?;
        self.record("select_rows", value, Op::SelectRows { x, rows: rows.to_vec() }, &[x])
    }

    /// Reverse pass from a scalar `loss`. Gradients are kept for leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<'p>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.len() / k.max(1);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                let gd = g.data();
                if self.needs(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        // dA = dC · op(B)ᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let ga = &gd[i * m * n..(i + 1) * m * n];
                        let aa = &ta.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dCᵀ · A
                            gemm(n, m, k, ga, true, aa, false, dst, false);
                        } else {
                            gemm(k, m, n, aa, true, ga, false, dst, false);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*b) {
                    let m = self.value(*b).len();
                    let mut db = vec![0.0; m];
                    for chunk in g.data().chunks(m.max(1)) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                }
                self.accumulate(grads, *a, g.clone());
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let m = tb.len().max(1);
                if self.needs(*b) {
                    let mut db = vec![0.0; tb.len()];
                    for (gc, ac) in g.data().chunks(m).zip(ta.data().chunks(m)) {
                        for ((d, gv), av) in db.iter_mut().zip(gc).zip(ac) {
                            *d += gv * av;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
                if self.needs(*a) {
                    let mut da = g.clone();
                    for chunk in da.data_mut().chunks_mut(m) {
                        for (d, bv) in chunk.iter_mut().zip(tb.data()) {
                            *d *= bv;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::Affine { x, scale } => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_at_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let width = shape[*axis] * inner;
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(outer * width);
                        for o in 0..outer {
                            let src = o * total * inner + offset;
                            data.extend_from_slice(&g.data()[src..src + width]);
                        }
                        self.accumulate(grads, p, Tensor::new(shape, data)?);
                    }
                    offset += width;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, dim, inner) = split_at_axis(&shape, *axis);
                let width = out.shape()[*axis] * inner;
                let mut dx = Tensor::zeros(&shape);
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    dx.data_mut()[base..base + width]
                        .copy_from_slice(&g.data()[o * width..(o + 1) * width]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => {
                let dx = g.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, dx);
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                self.accumulate(grads, *x, permute_data(g, &inverse));
            }
            Op::Softmax { x } => {
                let d = out.last_dim().max(1);
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(d).zip(out.data().chunks(d)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (dv, yv) in dr.iter_mut().zip(yr) {
                        *dv = yv * (*dv - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax { x } => {
                let d = out.last_dim().max(1);
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(d).zip(out.data().chunks(d)) {
                    let total: f64 = dr.iter().sum();
                    for (dv, yv) in dr.iter_mut().zip(yr) {
                        *dv -= yv.exp() * total;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = out.last_dim().max(1);
                let gv = self.value(*gain).data();
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, xr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::vector(dg));
                    self.accumulate(grads, *bias, Tensor::vector(db));
                }
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    let mut dxhat = vec![0.0; d];
                    for ((gr, xr), inv) in g.data().chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        dx.extend(
                            (0..d).map(|j| inv / df * (df * dxhat[j] - s1 - xr[j] * s2)),
                        );
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
            }
            Op::Sigmoid { x } => {
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(out.data()) {
                    *d *= y * (1.0 - y);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh { x } => {
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(out.data()) {
                    *d *= 1.0 - y * y;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(out.data()) {
                    if *y <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Embedding { table, ids } => {
                let shape = self.shape(*table).to_vec();
                let d = shape[1];
                let mut dt = Tensor::zeros(&shape);
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (a, b) in dst.iter_mut().zip(&g.data()[row * d..(row + 1) * d]) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::CrossEntropy { logits, targets, smoothing, probs } => {
                let shape = self.shape(*logits).to_vec();
                let v = *shape.last().unwrap();
                let upstream = g.data()[0];
                let mut dl = vec![0.0; probs.len()];
                for (i, target) in targets.iter().enumerate() {
                    let Some(y) = *target else { continue };
                    let row = &mut dl[i * v..(i + 1) * v];
                    for (j, d) in row.iter_mut().enumerate() {
                        let q = smoothing / v as f64 + if j == y { 1.0 - smoothing } else { 0.0 };
                        *d = upstream * (probs[i * v + j] - q);
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(shape, dl)?);
            }
            Op::CumulativeMean { x } => {
                let r = out.rank();
                let (steps, d) = (out.shape()[r - 2], out.shape()[r - 1]);
                let mut dx = g.clone();
                for block in dx.data_mut().chunks_mut((steps * d).max(1)) {
                    let mut acc = vec![0.0; d];
                    for s in (0..steps).rev() {
                        let row = &mut block[s * d..(s + 1) * d];
                        for (a, v) in acc.iter_mut().zip(row.iter_mut()) {
                            *a += *v / (s + 1) as f64;
                            *v = *a;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let upstream = g.data()[0];
                self.accumulate(grads, *x, Tensor::filled(self.shape(*x), upstream));
            }
            Op::Pick { x, index } => {
                let shape = self.shape(*x).to_vec();
                let d = *shape.last().unwrap_or(&1);
                let mut dx = Tensor::zeros(&shape);
                for (i, &j) in index.iter().enumerate() {
                    dx.data_mut()[i * d + j] = g.data()[i];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SegmentSum { x, lens } => {
                let mut data = Vec::with_capacity(lens.iter().sum());
                for (s, &l) in lens.iter().enumerate() {
                    data.extend(std::iter::repeat(g.data()[s]).take(l));
                }
                self.accumulate(grads, *x, Tensor::vector(data));
            }
            Op::SelectRows { x, rows } => {
                let shape = self.shape(*x).to_vec();
                let inner = self.value(*x).len() / shape[0].max(1);
                let mut dx = Tensor::zeros(&shape);
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut dx.data_mut()[r * inner..(r + 1) * inner];
                    for (a, b) in dst.iter_mut().zip(&g.data()[i * inner..(i + 1) * inner]) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}
