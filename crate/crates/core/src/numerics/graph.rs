//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the adjoint. `backward` replays the tape in reverse execution
//! order. A graph lives for one forward pass and is consumed by `backward`.

use std::borrow::Cow;

use crate::error::{Error, Result};

use super::kernels;
use super::real::Real;
use super::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Linear { x: NodeId, w: NodeId, rows: usize, inp: usize, out: usize },
    Add { a: NodeId, b: NodeId },
    AddTrailing { x: NodeId, b: NodeId, n: usize },
    Mul { a: NodeId, b: NodeId },
    MulTrailing { x: NodeId, v: NodeId, n: usize },
    Scale { x: NodeId, c: T },
    ScaleRows { x: NodeId, s: NodeId, n: usize },
    Sigmoid { x: NodeId },
    Silu { x: NodeId },
    Softmax { x: NodeId, n: usize },
    RmsNorm { x: NodeId, w: NodeId, n: usize, inv: Vec<T> },
    Rope { x: NodeId, d_head: usize, cos: Vec<T>, sin: Vec<T> },
    Attention(Box<AttentionTape<T>>),
    GatherRows { x: NodeId, idx: Vec<usize>, n: usize },
    ScatterRows { x: NodeId, idx: Vec<usize>, n: usize },
    Gather { x: NodeId, idx: Vec<usize> },
    SliceCols { x: NodeId, start: usize, n_in: usize },
    Sum { x: NodeId },
    WeightedSum { x: NodeId, w: Vec<T> },
    Huber { pred: NodeId, residual: Vec<T>, weight: Vec<T>, delta: T },
    AddN { xs: Vec<NodeId> },
    Reshape { x: NodeId },
}

struct AttentionTape<T> {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    starts: Vec<usize>,
    offsets: Vec<usize>,
    probs: Vec<T>,
}

struct Node<'a, T: Clone> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor without copying it. Gradients flow into it when the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(t.data()),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers owned data as a constant or as a differentiable input.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        let requires_grad = t.requires_grad;
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            value: Cow::Owned(t.into_data()),
            shape,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(self.value(id).to_vec(), self.shape(id)).expect("node shape is consistent")
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op_name: &str, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Result<NodeId> {
        debug_assert_eq!(value.len(), numel(&shape));
        if let Some(i) = value.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "{op_name} produced a non-finite value at flat index {i}"
            )));
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn matrix(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        match self.shape(id) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    fn last_dim(&self, id: NodeId) -> usize {
        *self.shape(id).last().unwrap()
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix(a, "matmul lhs")?;
        let (k2, n) = self.matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dimensions differ: {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, vec![m, n], Op::MatMul { a, b, m, k, n }, rg)
    }

    /// `x[rows×in] · w[out×in]ᵀ`, the bias-free linear layer.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (rows, inp) = self.matrix(x, "linear input")?;
        let (out, inp2) = self.matrix(w, "linear weight")?;
        if inp != inp2 {
            return Err(Error::shape(format!(
                "linear: input width {inp} vs weight width {inp2}"
            )));
        }
        let mut y = vec![T::zero(); rows * out];
        kernels::matmul_bt(self.value(x), self.value(w), &mut y, rows, inp, out);
        let rg = self.rg(x) || self.rg(w);
        self.push("linear", y, vec![rows, out], Op::Linear { x, w, rows, inp, out }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push("add", v, shape, Op::Add { a, b }, rg)
    }

    /// Adds a vector along the trailing dimension (bias add).
    pub fn add_trailing(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.last_dim(x);
        if self.value(b).len() != n {
            return Err(Error::shape(format!(
                "add_trailing: vector of {} vs trailing dim {n}",
                self.value(b).len()
            )));
        }
        let bv = self.value(b);
        let v = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &c)| a + c))
            .collect();
        let rg = self.rg(x) || self.rg(b);
        let shape = self.shape(x).to_vec();
        self.push("add_trailing", v, shape, Op::AddTrailing { x, b, n }, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push("mul", v, shape, Op::Mul { a, b }, rg)
    }

    /// Multiplies by a vector along the trailing dimension.
    pub fn mul_trailing(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let n = self.last_dim(x);
        if self.value(v).len() != n {
            return Err(Error::shape(format!(
                "mul_trailing: vector of {} vs trailing dim {n}",
                self.value(v).len()
            )));
        }
        let vv = self.value(v);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(vv).map(|(&a, &c)| a * c))
            .collect();
        let rg = self.rg(x) || self.rg(v);
        let shape = self.shape(x).to_vec();
        self.push("mul_trailing", out, shape, Op::MulTrailing { x, v, n }, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let v = self.value(x).iter().map(|&a| a * c).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push("scale", v, shape, Op::Scale { x, c }, rg)
    }

    /// `x[m×n]` with row `r` multiplied by `s[r]`; `s` may have any shape
    /// with `m` elements.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "scale_rows")?;
        if self.value(s).len() != m {
            return Err(Error::shape(format!(
                "scale_rows: {} scales for {m} rows",
                self.value(s).len()
            )));
        }
        let sv = self.value(s);
        let v = self
            .value(x)
            .chunks(n)
            .zip(sv)
            .flat_map(|(row, &c)| row.iter().map(move |&a| a * c))
            .collect();
        let rg = self.rg(x) || self.rg(s);
        self.push("scale_rows", v, vec![m, n], Op::ScaleRows { x, s, n }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).iter().map(|&a| kernels::sigmoid(a)).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push("sigmoid", v, shape, Op::Sigmoid { x }, rg)
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).iter().map(|&a| a * kernels::sigmoid(a)).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push("silu", v, shape, Op::Silu { x }, rg)
    }

    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.last_dim(x);
        if self.value(x).iter().any(|a| a.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut v = self.value(x).to_vec();
        for row in v.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push("softmax", v, shape, Op::Softmax { x, n }, rg)
    }

    /// Per-row `x / sqrt(mean(x²) + eps) ⊙ w`.
    pub fn rmsnorm(&mut self, x: NodeId, w: NodeId, eps: T) -> Result<NodeId> {
        let n = self.last_dim(x);
        if self.value(w).len() != n {
            return Err(Error::shape(format!(
                "rmsnorm: weight of {} vs width {n}",
                self.value(w).len()
            )));
        }
        let nf = T::of(n as f64);
        let wv = self.value(w);
        let mut inv = Vec::with_capacity(self.value(x).len() / n);
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(n) {
            let ms = row.iter().fold(T::zero(), |acc, &a| acc + a * a) / nf;
            let r = T::one() / (ms + eps).sqrt();
            inv.push(r);
            out.extend(row.iter().zip(wv).map(|(&a, &g)| a * r * g));
        }
        let rg = self.rg(x) || self.rg(w);
        let shape = self.shape(x).to_vec();
        self.push("rmsnorm", out, shape, Op::RmsNorm { x, w, n, inv }, rg)
    }

    /// Rotary position embedding on `x[T×D]` viewed as `heads` blocks of
    /// `d_head`, using the half-split pairing `(i, i + d_head/2)`.
    pub fn rope(&mut self, x: NodeId, heads: usize, positions: &[usize], base: f64) -> Result<NodeId> {
        let (t, d) = self.matrix(x, "rope")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("rope: width {d} not divisible by {heads} heads")));
        }
        let d_head = d / heads;
        if !d_head.is_multiple_of(2) {
            return Err(Error::Config(format!("rope: head dimension {d_head} is odd")));
        }
        if positions.len() != t {
            return Err(Error::shape(format!(
                "rope: {} positions for {t} tokens",
                positions.len()
            )));
        }
        let half = d_head / 2;
        let (cos, sin) = rope_tables::<T>(positions, half, base);
        let mut out = self.value(x).to_vec();
        for (ti, row) in out.chunks_mut(d).enumerate() {
            let c = &cos[ti * half..(ti + 1) * half];
            let s = &sin[ti * half..(ti + 1) * half];
            for head in row.chunks_mut(d_head) {
                for i in 0..half {
                    let (a, b) = (head[i], head[i + half]);
                    head[i] = a * c[i] - b * s[i];
                    head[i + half] = a * s[i] + b * c[i];
                }
            }
        }
        let rg = self.rg(x);
        self.push("rope", out, vec![t, d], Op::Rope { x, d_head, cos, sin }, rg)
    }

    /// Scaled dot-product attention over `heads` heads. Token `t` attends to
    /// tokens `starts[t]..=t`; `starts` encodes both causality and the
    /// boundaries of packed sequences.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, starts: &[usize]) -> Result<NodeId> {
        let (t, d) = self.matrix(q, "attention q")?;
        self.same_shape(q, k, "attention k")?;
        self.same_shape(q, v, "attention v")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("attention: width {d} not divisible by {heads} heads")));
        }
        if starts.len() != t || starts.iter().enumerate().any(|(i, &s)| s > i) {
            return Err(Error::shape("attention: invalid window starts".to_string()));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut offsets = Vec::with_capacity(t + 1);
        let mut total = 0usize;
        for (i, &s) in starts.iter().enumerate() {
            offsets.push(total);
            total += i - s + 1;
        }
        offsets.push(total);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); total * heads];
        let mut out = vec![T::zero(); t * d];
        for h in 0..heads {
            let col = h * dh;
            for i in 0..t {
                let qi = &qv[i * d + col..i * d + col + dh];
                let base = h * total + offsets[i];
                let p = &mut probs[base..base + (i - starts[i] + 1)];
                for (slot, j) in p.iter_mut().zip(starts[i]..=i) {
                    *slot = kernels::dot(qi, &kv[j * d + col..j * d + col + dh]) * scale;
                }
                kernels::softmax_in_place(p);
                let oi = &mut out[i * d + col..i * d + col + dh];
                for (&pj, j) in p.iter().zip(starts[i]..=i) {
                    let vj = &vv[j * d + col..j * d + col + dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o = *o + pj * x;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let tape = AttentionTape {
            q,
            k,
            v,
            heads,
            starts: starts.to_vec(),
            offsets,
            probs,
        };
        self.push("attention", out, vec![t, d], Op::Attention(Box::new(tape)), rg)
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Range { index: bad, len: m });
        }
        if idx.is_empty() {
            return Err(Error::shape("gather_rows: empty index set".to_string()));
        }
        let xv = self.value(x);
        let v = idx.iter().flat_map(|&i| xv[i * n..(i + 1) * n].iter().copied()).collect();
        let rg = self.rg(x);
        self.push("gather_rows", v, vec![idx.len(), n], Op::GatherRows { x, idx: idx.to_vec(), n }, rg)
    }

    /// Zero matrix of `rows` rows with `x`'s rows added at `idx`.
    pub fn scatter_rows(&mut self, x: NodeId, idx: &[usize], rows: usize) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "scatter_rows")?;
        if idx.len() != m {
            return Err(Error::shape(format!("scatter_rows: {} indices for {m} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Range { index: bad, len: rows });
        }
        let mut out = vec![T::zero(); rows * n];
        let xv = self.value(x);
        for (r, &i) in idx.iter().enumerate() {
            for (o, &a) in out[i * n..(i + 1) * n].iter_mut().zip(&xv[r * n..(r + 1) * n]) {
                *o = *o + a;
            }
        }
        let rg = self.rg(x);
        self.push("scatter_rows", out, vec![rows, n], Op::ScatterRows { x, idx: idx.to_vec(), n }, rg)
    }

    /// Picks flat elements of `x` into a vector.
    pub fn gather(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let len = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::Range { index: bad, len });
        }
        if idx.is_empty() {
            return Err(Error::shape("gather: empty index set".to_string()));
        }
        let xv = self.value(x);
        let v = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x);
        self.push("gather", v, vec![idx.len()], Op::Gather { x, idx: idx.to_vec() }, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::shape(format!("slice_cols: bad range {start}..{end} of {n}")));
        }
        let v = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let rg = self.rg(x);
        self.push("slice_cols", v, vec![m, end - start], Op::SliceCols { x, start, n_in: n }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push("sum", vec![s], vec![1], Op::Sum { x }, rg)
    }

    /// `Σ w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: NodeId, w: Vec<T>) -> Result<NodeId> {
        if w.len() != self.value(x).len() {
            return Err(Error::shape(format!(
                "weighted_sum: {} weights for {} values",
                w.len(),
                self.value(x).len()
            )));
        }
        let s = kernels::dot(self.value(x), &w);
        let rg = self.rg(x);
        self.push("weighted_sum", vec![s], vec![1], Op::WeightedSum { x, w }, rg)
    }

    /// `Σ_i weight_i · huber(target_i − pred_i)` as a scalar.
    pub fn huber(&mut self, pred: NodeId, target: &[T], weight: Vec<T>, delta: T) -> Result<NodeId> {
        let n = self.value(pred).len();
        if target.len() != n || weight.len() != n {
            return Err(Error::shape(format!(
                "huber: {n} predictions, {} targets, {} weights",
                target.len(),
                weight.len()
            )));
        }
        let residual: Vec<T> = target.iter().zip(self.value(pred)).map(|(&x, &p)| x - p).collect();
        let loss = residual
            .iter()
            .zip(&weight)
            .fold(T::zero(), |acc, (&r, &w)| if w == T::zero() { acc } else { acc + w * huber_value(r, delta) });
        let rg = self.rg(pred);
        self.push("huber", vec![loss], vec![1], Op::Huber { pred, residual, weight, delta }, rg)
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::shape("add_n: no inputs".to_string()))?;
        let mut v = self.value(first).to_vec();
        for &x in rest {
            self.same_shape(first, x, "add_n")?;
            for (o, &a) in v.iter_mut().zip(self.value(x)) {
                *o = *o + a;
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        let shape = self.shape(first).to_vec();
        self.push("add_n", v, shape, Op::AddN { xs: xs.to_vec() }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape(format!(
                "reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push("reshape", v, shape.to_vec(), Op::Reshape { x }, rg)
    }

    /// Replays the tape in reverse from a scalar `loss`.
    pub fn backward(self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.rg(*a) {
                    let ga = self.slot(grads, *a);
                    kernels::matmul_bt(g, self.value(*b), ga, *m, *n, *k);
                }
                if self.rg(*b) {
                    let gb = self.slot(grads, *b);
                    kernels::matmul_at(self.value(*a), g, gb, *m, *k, *n);
                }
            }
            Op::Linear { x, w, rows, inp, out: o } => {
                if self.rg(*x) {
                    let gx = self.slot(grads, *x);
                    kernels::matmul(g, self.value(*w), gx, *rows, *o, *inp);
                }
                if self.rg(*w) {
                    let gw = self.slot(grads, *w);
                    kernels::matmul_at(g, self.value(*x), gw, *rows, *o, *inp);
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if self.rg(id) {
                        axpy(self.slot(grads, id), g, T::one());
                    }
                }
            }
            Op::AddTrailing { x, b, n } => {
                if self.rg(*x) {
                    axpy(self.slot(grads, *x), g, T::one());
                }
                if self.rg(*b) {
                    let gb = self.slot(grads, *b);
                    for row in g.chunks(*n) {
                        axpy(gb, row, T::one());
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let ga = self.slot(grads, *a);
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + gi * bi;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let gb = self.slot(grads, *b);
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + gi * ai;
                    }
                }
            }
            Op::MulTrailing { x, v, n } => {
                if self.rg(*x) {
                    let vv = self.value(*v);
                    let gx = self.slot(grads, *x);
                    for (orow, grow) in gx.chunks_mut(*n).zip(g.chunks(*n)) {
                        for ((o, &gi), &vi) in orow.iter_mut().zip(grow).zip(vv) {
                            *o = *o + gi * vi;
                        }
                    }
                }
                if self.rg(*v) {
                    let xv = self.value(*x);
                    let gv = self.slot(grads, *v);
                    for (xrow, grow) in xv.chunks(*n).zip(g.chunks(*n)) {
                        for ((o, &gi), &xi) in gv.iter_mut().zip(grow).zip(xrow) {
                            *o = *o + gi * xi;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.rg(*x) {
                    axpy(self.slot(grads, *x), g, *c);
                }
            }
            Op::ScaleRows { x, s, n } => {
                if self.rg(*x) {
                    let sv = self.value(*s);
                    let gx = self.slot(grads, *x);
                    for ((orow, grow), &c) in gx.chunks_mut(*n).zip(g.chunks(*n)).zip(sv) {
                        axpy(orow, grow, c);
                    }
                }
                if self.rg(*s) {
                    let xv = self.value(*x);
                    let gs = self.slot(grads, *s);
                    for ((o, grow), xrow) in gs.iter_mut().zip(g.chunks(*n)).zip(xv.chunks(*n)) {
                        *o = *o + kernels::dot(grow, xrow);
                    }
                }
            }
            Op::Sigmoid { x } => {
                let gx = self.slot(grads, *x);
                for ((o, &gi), &y) in gx.iter_mut().zip(g).zip(out.iter()) {
                    *o = *o + gi * y * (T::one() - y);
                }
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                let gx = self.slot(grads, *x);
                for ((o, &gi), &a) in gx.iter_mut().zip(g).zip(xv) {
                    let s = kernels::sigmoid(a);
                    *o = *o + gi * s * (T::one() + a * (T::one() - s));
                }
            }
            Op::Softmax { x, n } => {
                let gx = self.slot(grads, *x);
                for ((orow, grow), yrow) in gx.chunks_mut(*n).zip(g.chunks(*n)).zip(out.chunks(*n)) {
                    let dotp = kernels::dot(grow, yrow);
                    for ((o, &gi), &y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o = *o + y * (gi - dotp);
                    }
                }
            }
            Op::RmsNorm { x, w, n, inv } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.rg(*x) {
                    let nf = T::of(*n as f64);
                    let gx = self.slot(grads, *x);
                    for (((orow, grow), xrow), &r) in
                        gx.chunks_mut(*n).zip(g.chunks(*n)).zip(xv.chunks(*n)).zip(inv)
                    {
                        let mut acc = T::zero();
                        for ((&gi, &wi), &xi) in grow.iter().zip(wv).zip(xrow) {
                            acc = acc + gi * wi * xi;
                        }
                        let coef = r * r * r * acc / nf;
                        for (((o, &gi), &wi), &xi) in orow.iter_mut().zip(grow).zip(wv).zip(xrow) {
                            *o = *o + r * wi * gi - coef * xi;
                        }
                    }
                }
                if self.rg(*w) {
                    let gw = self.slot(grads, *w);
                    for ((grow, xrow), &r) in g.chunks(*n).zip(xv.chunks(*n)).zip(inv) {
                        for ((o, &gi), &xi) in gw.iter_mut().zip(grow).zip(xrow) {
                            *o = *o + gi * xi * r;
                        }
                    }
                }
            }
            Op::Rope { x, d_head, cos, sin } => {
                let half = d_head / 2;
                let d = node.shape[1];
                let gx = self.slot(grads, *x);
                for (ti, (orow, grow)) in gx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                    let c = &cos[ti * half..(ti + 1) * half];
                    let s = &sin[ti * half..(ti + 1) * half];
                    for (ohead, ghead) in orow.chunks_mut(*d_head).zip(grow.chunks(*d_head)) {
                        for i in 0..half {
                            let (a, b) = (ghead[i], ghead[i + half]);
                            ohead[i] = ohead[i] + a * c[i] + b * s[i];
                            ohead[i + half] = ohead[i + half] - a * s[i] + b * c[i];
                        }
                    }
                }
            }
            Op::Attention(tape) => self.attention_backward(tape, &node.shape, g, grads),
            Op::GatherRows { x, idx, n } => {
                let gx = self.slot(grads, *x);
                for (grow, &i) in g.chunks(*n).zip(idx) {
                    axpy(&mut gx[i * n..(i + 1) * n], grow, T::one());
                }
            }
            Op::ScatterRows { x, idx, n } => {
                let gx = self.slot(grads, *x);
                for (orow, &i) in gx.chunks_mut(*n).zip(idx) {
                    axpy(orow, &g[i * n..(i + 1) * n], T::one());
                }
            }
            Op::Gather { x, idx } => {
                let gx = self.slot(grads, *x);
                for (&gi, &i) in g.iter().zip(idx) {
                    gx[i] = gx[i] + gi;
                }
            }
            Op::SliceCols { x, start, n_in } => {
                let w = node.shape[1];
                let gx = self.slot(grads, *x);
                for (orow, grow) in gx.chunks_mut(*n_in).zip(g.chunks(w)) {
                    axpy(&mut orow[*start..*start + w], grow, T::one());
                }
            }
            Op::Sum { x } => {
                let gx = self.slot(grads, *x);
                for o in gx.iter_mut() {
                    *o = *o + g[0];
                }
            }
            Op::WeightedSum { x, w } => {
                axpy(self.slot(grads, *x), w, g[0]);
            }
            Op::Huber { pred, residual, weight, delta } => {
                let gp = self.slot(grads, *pred);
                for ((o, &r), &w) in gp.iter_mut().zip(residual).zip(weight) {
                    if w != T::zero() {
                        // d/dpred of huber(target - pred)
                        *o = *o - g[0] * w * huber_slope(r, *delta);
                    }
                }
            }
            Op::AddN { xs } => {
                for &x in xs {
                    if self.rg(x) {
                        axpy(self.slot(grads, x), g, T::one());
                    }
                }
            }
            Op::Reshape { x } => {
                axpy(self.slot(grads, *x), g, T::one());
            }
        }
    }

    fn attention_backward(&self, tape: &AttentionTape<T>, shape: &[usize], g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (t, d) = (shape[0], shape[1]);
        let heads = tape.heads;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let total = *tape.offsets.last().unwrap();
        let (qv, kv, vv) = (self.value(tape.q), self.value(tape.k), self.value(tape.v));
        let mut dq = vec![T::zero(); t * d];
        let mut dk = vec![T::zero(); t * d];
        let mut dv = vec![T::zero(); t * d];
        let mut dp = Vec::new();
        for h in 0..heads {
            let col = h * dh;
            for i in 0..t {
                let start = tape.starts[i];
                let base = h * total + tape.offsets[i];
                let p = &tape.probs[base..base + (i - start + 1)];
                let gi = &g[i * d + col..i * d + col + dh];
                dp.clear();
                for (&pj, j) in p.iter().zip(start..=i) {
                    dp.push(kernels::dot(gi, &vv[j * d + col..j * d + col + dh]));
                    axpy(&mut dv[j * d + col..j * d + col + dh], gi, pj);
                }
                let mean = kernels::dot(p, &dp);
                let qi = &qv[i * d + col..i * d + col + dh];
                for ((&pj, &dpj), j) in p.iter().zip(&dp).zip(start..=i) {
                    let ds = pj * (dpj - mean) * scale;
                    axpy(&mut dq[i * d + col..i * d + col + dh], &kv[j * d + col..j * d + col + dh], ds);
                    axpy(&mut dk[j * d + col..j * d + col + dh], qi, ds);
                }
            }
        }
        for (id, delta) in [(tape.q, dq), (tape.k, dk), (tape.v, dv)] {
            if self.rg(id) {
                axpy(self.slot(grads, id), &delta, T::one());
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> &'g mut [T] {
        let len = self.nodes[id.0].value.len();
        grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
    }
}

fn axpy<T: Real>(y: &mut [T], x: &[T], a: T) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

pub(crate) fn huber_value<T: Real>(r: T, delta: T) -> T {
    let half = T::of(0.5);
    let a = r.abs();
    if a <= delta {
        half * r * r
    } else {
        delta * (a - half * delta)
    }
}

/// Derivative of the Huber function with respect to the residual.
fn huber_slope<T: Real>(r: T, delta: T) -> T {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

fn rope_tables<T: Real>(positions: &[usize], half: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let d_head = (2 * half) as f64;
    let inv_freq: Vec<f64> = (0..half).map(|i| base.powf(-(2.0 * i as f64) / d_head)).collect();
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for &f in &inv_freq {
            let angle = p as f64 * f;
            cos.push(T::of(angle.cos()));
            sin.push(T::of(angle.sin()));
        }
    }
    (cos, sin)
}
