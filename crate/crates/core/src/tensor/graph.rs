use std::collections::HashMap;

use super::kernels::{gelu, gelu_grad, matmul_into, softmax_row, Real};
use super::{numel, ParamStore, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A block of query rows that attends to a block of key/value rows.
///
/// Fused attention takes a list of segments so that several independent
/// attention problems (one per part) run as one tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Segment {
    pub fn full(q_len: usize, k_len: usize) -> Self {
        Self {
            q_start: 0,
            q_len,
            k_start: 0,
            k_len,
        }
    }

    /// Block-diagonal segments: query block `i` attends to key block `i`.
    pub fn blocks(q_lens: &[usize], k_lens: &[usize]) -> Vec<Self> {
        assert_eq!(q_lens.len(), k_lens.len());
        let (mut qs, mut ks) = (0, 0);
        q_lens
            .iter()
            .zip(k_lens)
            .map(|(&q, &k)| {
                let s = Self {
                    q_start: qs,
                    q_len: q,
                    k_start: ks,
                    k_len: k,
                };
                qs += q;
                ks += k;
                s
            })
            .collect()
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<T>,
    },
    FrobeniusNorm(Var),
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Forward tape. Build a computation, call [`Graph::backward`] on a scalar,
/// then read gradients with [`Graph::grad`].
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
    bindings: Vec<(Var, String)>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            bindings: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    fn cols(&self, v: Var) -> usize {
        *self.nodes[v.0].shape.last().unwrap_or(&1)
    }

    fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.len() / self.cols(v)
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    /// Bind a stored parameter. Repeated binds of one name share a node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let shape = p.tensor.shape().to_vec();
        let v = self.push(p.tensor.data().to_vec(), shape, Op::Leaf, p.trainable);
        self.bound.insert(name.to_string(), v);
        self.bindings.push((v, name.to_string()));
        Ok(v)
    }

    pub fn bindings(&self) -> impl Iterator<Item = (Var, &str)> {
        self.bindings.iter().map(|(v, n)| (*v, n.as_str()))
    }

    /// Copy of `v` that is cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (value, shape) = (n.value.clone(), n.shape.clone());
        self.push(value, shape, Op::Leaf, false)
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.nodes[v.0].value.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(what.to_string()))
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(value, shape, op, rg)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, shape, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[n×d] + row[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.cols(x);
        if self.value(row).len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).to_vec();
        let value = self
            .value(x)
            .chunks(d)
            .flat_map(|c| c.iter().zip(&r).map(|(&a, &b)| a + b).collect::<Vec<_>>())
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, shape, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(T::zero()).sqrt(), Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![s], vec![1], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s: T = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![s / n], vec![1], Op::Mean(a), rg)
    }

    /// `sqrt(Σ x²)`; the gradient at zero is taken as zero.
    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().map(|&x| x * x).sum();
        let rg = self.rg(a);
        self.push(vec![s.sqrt()], vec![1], Op::FrobeniusNorm(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(value, shape, Op::Reshape(a), rg))
    }

    /// `a[n×k] · b[k×m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        matmul_into(self.value(a), self.value(b), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![n, m], Op::MatMul(a, b), rg))
    }

    /// `x[*×in] · w[in×out] + b[out]`; leading axes of `x` are flattened.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        let inner = self.cols(x);
        if sw.len() != 2 || sw[0] != inner {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: self.shape(x).to_vec(),
                rhs: sw,
            });
        }
        let out_dim = sw[1];
        if let Some(b) = b {
            if self.value(b).len() != out_dim {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = self.rows(x);
        let mut out = vec![T::zero(); rows * out_dim];
        if let Some(b) = b {
            let bias = self.value(b);
            for r in out.chunks_mut(out_dim) {
                r.copy_from_slice(bias);
            }
        }
        T::gemm(
            rows,
            inner,
            out_dim,
            T::one(),
            self.value(x),
            inner,
            1,
            self.value(w),
            out_dim,
            1,
            T::one(),
            &mut out,
            out_dim,
            1,
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, shape, Op::Linear { x, w, b }, rg))
    }

    /// Row-wise normalization to zero mean and unit variance (eps 1e-5),
    /// followed by an optional `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, affine: Option<(Var, Var)>) -> Result<Var> {
        let d = self.cols(x);
        if let Some((gm, bt)) = affine {
            if self.value(gm).len() != d || self.value(bt).len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm affine",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(gm).to_vec(),
                });
            }
        }
        let eps = T::lit(1e-5);
        let dn = T::from_usize(d).unwrap();
        let rows = self.rows(x);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for (r, (src, dst)) in self.value(x).chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = src.iter().copied().sum::<T>() / dn;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * rs;
            }
        }
        let out = match affine {
            Some((gm, bt)) => {
                let (g, b) = (self.value(gm), self.value(bt));
                xhat.chunks(d)
                    .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b))
                    .collect()
            }
            None => xhat.clone(),
        };
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || affine.is_some_and(|(g, b)| self.rg(g) || self.rg(b));
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                affine,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let d = self.cols(first);
        let mut value = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.cols(p) != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            value.extend_from_slice(self.value(p));
            rows += self.rows(p);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, vec![rows, d], Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.cols(x);
        if len == 0 || start + len > self.rows(x) {
            return Err(TensorError::Invalid(format!(
                "slice_rows {start}+{len} of {} rows",
                self.rows(x)
            )));
        }
        let value = self.value(x)[start * d..(start + len) * d].to_vec();
        let rg = self.rg(x);
        Ok(self.push(value, vec![len, d], Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let rows = self.rows(first);
        if parts.iter().any(|&p| self.rows(p) != rows) {
            return Err(TensorError::Invalid("concat_cols row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut value = vec![T::zero(); rows * total];
        let mut off = 0;
        for &p in parts {
            let c = self.cols(p);
            for (r, src) in self.value(p).chunks(c).enumerate() {
                value[r * total + off..r * total + off + c].copy_from_slice(src);
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, vec![rows, total], Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Fused multi-head scaled dot-product attention on already projected
    /// `q`, `k`, `v` (each `rows×D`, `D = heads·head_dim`). Heads are
    /// contiguous column blocks. Each segment's queries see only that
    /// segment's keys.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
    ) -> Result<Var> {
        let d = self.cols(q);
        if self.cols(k) != d || self.cols(v) != d || self.rows(k) != self.rows(v) {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(TensorError::Invalid(format!("{d} columns into {heads} heads")));
        }
        let (nq, nk) = (self.rows(q), self.rows(k));
        for s in segments {
            if s.k_len == 0 {
                return Err(TensorError::EmptyContext);
            }
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk {
                return Err(TensorError::Invalid(format!("segment {s:?} out of range")));
            }
        }
        let hd = d / heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let total: usize = segments.iter().map(|s| heads * s.q_len * s.k_len).sum();
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); nq * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut off = 0;
        for s in segments {
            let block = s.q_len * s.k_len;
            for h in 0..heads {
                let p = &mut probs[off..off + block];
                T::gemm(
                    s.q_len,
                    hd,
                    s.k_len,
                    scale,
                    &qv[s.q_start * d + h * hd..],
                    d,
                    1,
                    &kv[s.k_start * d + h * hd..],
                    1,
                    d,
                    T::zero(),
                    p,
                    s.k_len,
                    1,
                );
                for row in p.chunks_mut(s.k_len) {
                    softmax_row(row);
                }
                T::gemm(
                    s.q_len,
                    s.k_len,
                    hd,
                    T::one(),
                    p,
                    s.k_len,
                    1,
                    &vv[s.k_start * d + h * hd..],
                    d,
                    1,
                    T::zero(),
                    &mut out[s.q_start * d + h * hd..],
                    d,
                    1,
                );
                off += block;
            }
        }
        let shape = self.shape(q).to_vec();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            shape,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Attention weights recorded by an attention node, laid out per segment
    /// then per head as `q_len×k_len` row-major blocks.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar. Gradients of earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backprop(&self.nodes, i, &g, &mut self.grads);
        }
        Ok(())
    }
}

fn buf<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
    let n = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, f: impl Fn(usize) -> T) {
    if !nodes[v.0].requires_grad {
        return;
    }
    for (i, o) in buf(grads, nodes, v).iter_mut().enumerate() {
        *o += f(i);
    }
}

fn col_sums_into<T: Real>(g: &[T], cols: usize, out: &mut [T]) {
    for row in g.chunks(cols) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let rg = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |j| g[j]);
            acc(grads, nodes, *b, |j| g[j]);
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |j| g[j]);
            acc(grads, nodes, *b, |j| -g[j]);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a, |j| g[j] * bv[j]);
            acc(grads, nodes, *b, |j| g[j] * av[j]);
        }
        Op::AddRow(x, r) => {
            acc(grads, nodes, *x, |j| g[j]);
            if rg(*r) {
                let d = val(*r).len();
                col_sums_into(g, d, buf(grads, nodes, *r));
            }
        }
        Op::Scale(a, c) => acc(grads, nodes, *a, |j| g[j] * *c),
        Op::Gelu(a) => {
            let av = val(*a);
            acc(grads, nodes, *a, |j| g[j] * gelu_grad(av[j]));
        }
        Op::Tanh(a) => {
            let y = &nodes[i].value;
            acc(grads, nodes, *a, |j| g[j] * (T::one() - y[j] * y[j]));
        }
        Op::Relu(a) => {
            let av = val(*a);
            acc(grads, nodes, *a, |j| if av[j] > T::zero() { g[j] } else { T::zero() });
        }
        Op::Abs(a) => {
            let av = val(*a);
            acc(grads, nodes, *a, |j| {
                if av[j] > T::zero() {
                    g[j]
                } else if av[j] < T::zero() {
                    -g[j]
                } else {
                    T::zero()
                }
            });
        }
        Op::Square(a) => {
            let av = val(*a);
            acc(grads, nodes, *a, |j| g[j] * T::lit(2.0) * av[j]);
        }
        Op::Sqrt(a) => {
            let y = &nodes[i].value;
            acc(grads, nodes, *a, |j| {
                if y[j] > T::zero() {
                    g[j] / (T::lit(2.0) * y[j])
                } else {
                    T::zero()
                }
            });
        }
        Op::Sum(a) => acc(grads, nodes, *a, |_| g[0]),
        Op::Mean(a) => {
            let n = T::from_usize(val(*a).len()).unwrap();
            acc(grads, nodes, *a, |_| g[0] / n);
        }
        Op::FrobeniusNorm(a) => {
            let y = nodes[i].value[0];
            let av = val(*a);
            if y > T::zero() {
                acc(grads, nodes, *a, |j| g[0] * av[j] / y);
            }
        }
        Op::Reshape(a) => acc(grads, nodes, *a, |j| g[j]),
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).len();
                acc(grads, nodes, p, |j| g[off + j]);
                off += n;
            }
        }
        Op::SliceRows { x, start } => {
            if rg(*x) {
                let d = *nodes[i].shape.last().unwrap();
                let b = buf(grads, nodes, *x);
                for (o, &v) in b[start * d..].iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = *nodes[i].shape.last().unwrap();
            let mut off = 0;
            for &p in parts {
                let c = *nodes[p.0].shape.last().unwrap();
                acc(grads, nodes, p, |j| g[(j / c) * total + off + j % c]);
                off += c;
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (n, k, m) = (sa[0], sa[1], sb[1]);
            if rg(*a) {
                let bv = val(*b);
                let out = buf(grads, nodes, *a);
                T::gemm(n, m, k, T::one(), g, m, 1, bv, 1, m, T::one(), out, k, 1);
            }
            if rg(*b) {
                let av = val(*a);
                let out = buf(grads, nodes, *b);
                T::gemm(k, n, m, T::one(), av, 1, k, g, m, 1, T::one(), out, m, 1);
            }
        }
        Op::Linear { x, w, b } => {
            let sw = &nodes[w.0].shape;
            let (inner, out_dim) = (sw[0], sw[1]);
            let rows = g.len() / out_dim;
            if rg(*x) {
                let wv = val(*w);
                let out = buf(grads, nodes, *x);
                T::gemm(rows, out_dim, inner, T::one(), g, out_dim, 1, wv, 1, out_dim, T::one(), out, inner, 1);
            }
            if rg(*w) {
                let xv = val(*x);
                let out = buf(grads, nodes, *w);
                T::gemm(inner, rows, out_dim, T::one(), xv, 1, inner, g, out_dim, 1, T::one(), out, out_dim, 1);
            }
            if let Some(b) = b {
                if rg(*b) {
                    col_sums_into(g, out_dim, buf(grads, nodes, *b));
                }
            }
        }
        Op::LayerNorm {
            x,
            affine,
            xhat,
            rstd,
        } => {
            let d = *nodes[i].shape.last().unwrap();
            let dn = T::from_usize(d).unwrap();
            let gamma = affine.map(|(gm, _)| val(gm));
            if let Some((gm, bt)) = affine {
                if rg(*gm) {
                    let out = buf(grads, nodes, *gm);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gv), &h) in out.iter_mut().zip(gr).zip(hr) {
                            *o += gv * h;
                        }
                    }
                }
                if rg(*bt) {
                    col_sums_into(g, d, buf(grads, nodes, *bt));
                }
            }
            if rg(*x) {
                let out = buf(grads, nodes, *x);
                let mut dxhat = vec![T::zero(); d];
                for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    for c in 0..d {
                        dxhat[c] = gr[c] * gamma.map_or(T::one(), |gm| gm[c]);
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / dn;
                    let m2 = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    let o = &mut out[r * d..(r + 1) * d];
                    for c in 0..d {
                        o[c] += rstd[r] * (dxhat[c] - m1 - hr[c] * m2);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
            probs,
        } => {
            let d = *nodes[i].shape.last().unwrap();
            let hd = d / heads;
            let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let mut dq = rg(*q).then(|| vec![T::zero(); qv.len()]);
            let mut dk = rg(*k).then(|| vec![T::zero(); kv.len()]);
            let mut dv = rg(*v).then(|| vec![T::zero(); vv.len()]);
            let mut off = 0;
            for s in segments {
                let block = s.q_len * s.k_len;
                let mut dp = vec![T::zero(); block];
                for h in 0..*heads {
                    let p = &probs[off..off + block];
                    let go = s.q_start * d + h * hd;
                    let ko = s.k_start * d + h * hd;
                    if let Some(dv) = dv.as_mut() {
                        T::gemm(s.k_len, s.q_len, hd, T::one(), p, 1, s.k_len, &g[go..], d, 1, T::one(), &mut dv[ko..], d, 1);
                    }
                    if dq.is_some() || dk.is_some() {
                        T::gemm(s.q_len, hd, s.k_len, T::one(), &g[go..], d, 1, &vv[ko..], 1, d, T::zero(), &mut dp, s.k_len, 1);
                        for (dr, pr) in dp.chunks_mut(s.k_len).zip(p.chunks(s.k_len)) {
                            let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                            for (x, &pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot);
                            }
                        }
                        if let Some(dq) = dq.as_mut() {
                            T::gemm(s.q_len, s.k_len, hd, scale, &dp, s.k_len, 1, &kv[ko..], d, 1, T::one(), &mut dq[go..], d, 1);
                        }
                        if let Some(dk) = dk.as_mut() {
                            T::gemm(s.k_len, s.q_len, hd, scale, &dp, 1, s.k_len, &qv[go..], d, 1, T::one(), &mut dk[ko..], d, 1);
                        }
                    }
                    off += block;
                }
            }
            for (var, contrib) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(c) = contrib {
                    for (o, x) in buf(grads, nodes, var).iter_mut().zip(c) {
                        *o += x;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        g.leaf(Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn linear_identity_and_hand_product() {
        let mut g = Graph::<f64>::new();
        let x = g.constant([1, 2], vec![1.0, 2.0]).unwrap();
        let w = g.constant([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = g.constant([2], vec![0.0, 0.0]).unwrap();
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0]);

        let x = g.constant([1, 2], vec![1.0, 0.0]).unwrap();
        let w = g.constant([2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = g.constant([2], vec![1.0, 1.0]).unwrap();
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &[3.0, 4.0]);
    }

    #[test]
    fn linear_bias_grad_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.constant([3, 2], vec![0.5; 6]).unwrap();
        let w = leaf(&mut g, &[2, 4], vec![0.1; 8]);
        let b = leaf(&mut g, &[4], vec![0.0; 4]);
        let y = g.linear(x, w, Some(b)).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[3.0; 4]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant([1, 3], vec![1.0; 3]).unwrap();
        let w = g.constant([2, 2], vec![1.0; 4]).unwrap();
        assert!(matches!(g.linear(x, w, None), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn square_grad_at_three() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[1], vec![3.0]);
        let y = g.square(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn detached_has_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[2], vec![1.0, 2.0]);
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(d).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let c = g.constant([1, 4], vec![2.5; 4]).unwrap();
        let y = g.layer_norm(c, None).unwrap();
        assert!(g.value(y).iter().all(|v| *v == 0.0));
        let r = g.constant([1, 2], vec![1.0, -1.0]).unwrap();
        let y = g.layer_norm(r, None).unwrap();
        assert!((g.value(y)[0] - 1.0).abs() < 1e-5);
        assert!((g.value(y)[1] + 1.0).abs() < 1e-5);
        assert_eq!(g.shape(y), &[1, 2]);
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant([3, 4], (0..12).map(|i| i as f64 * 0.3).collect()).unwrap();
        let k = g.constant([1, 4], vec![0.2, -0.1, 0.5, 0.9]).unwrap();
        let v = g.constant([1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let o = g.attention(q, k, v, 2, &[Segment::full(3, 1)]).unwrap();
        for row in g.value(o).chunks(4) {
            assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn attention_empty_context() {
        let mut g = Graph::<f64>::new();
        let q = g.constant([1, 2], vec![1.0, 2.0]).unwrap();
        let k = g.constant([1, 2], vec![1.0, 2.0]).unwrap();
        let seg = Segment {
            q_start: 0,
            q_len: 1,
            k_start: 0,
            k_len: 0,
        };
        assert!(matches!(g.attention(q, k, k, 1, &[seg]), Err(TensorError::EmptyContext)));
    }
}
