use std::sync::Arc;

use crate::error::TensorError;
use crate::scalar::{gemm_into, MatRef, Scalar};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    MulRows(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Sigmoid(Var),
    Erf(Var),
    Silu(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax { x: Var, axis: usize },
    Sum { x: Var, axis: usize, scale: S },
    SumAll { x: Var, scale: S },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Gather { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, inv_rms: Vec<S> },
    Rotary { x: Var, cos: Arc<[S]>, sin: Arc<[S]> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<S> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always a topological order of the (acyclic) graph.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let n = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, n, inner)
}

/// For each output element of `permute(in_shape, axes)`, the flat offset of
/// its source element.
fn permute_offsets(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(in_shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_trainable_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf) && self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn check_suffix(&self, op: &'static str, x: Var, b: Var) -> Result<usize, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb || sb.is_empty() {
            return Err(TensorError::ShapeMismatch { op, lhs: sx.to_vec(), rhs: sb.to_vec() });
        }
        Ok(numel(sb))
    }

    /// `x + b` where `b`'s shape is a trailing suffix of `x`'s shape.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let width = self.check_suffix("add_bias", x, b)?;
        let vb = self.nodes[b.0].value.data();
        let vx = &self.nodes[x.0].value;
        let data =
            vx.data().iter().enumerate().map(|(i, &v)| v + vb[i % width]).collect::<Vec<_>>();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    /// `x * g` where `g`'s shape is a trailing suffix of `x`'s shape.
    pub fn mul_bias(&mut self, x: Var, g: Var) -> Result<Var, TensorError> {
        let width = self.check_suffix("mul_bias", x, g)?;
        let vg = self.nodes[g.0].value.data();
        let vx = &self.nodes[x.0].value;
        let data =
            vx.data().iter().enumerate().map(|(i, &v)| v * vg[i % width]).collect::<Vec<_>>();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, g]);
        Ok(self.push(value, Op::MulBias(x, g), rg))
    }

    /// Scales every row of `x` (last axis) by the matching entry of `w`,
    /// whose shape is `x`'s shape without the last axis.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.is_empty() || sx[..sx.len() - 1] != *sw {
            return Err(TensorError::ShapeMismatch {
                op: "mul_rows",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let width = *sx.last().unwrap();
        let vw = self.nodes[w.0].value.data();
        let vx = &self.nodes[x.0].value;
        let data =
            vx.data().iter().enumerate().map(|(i, &v)| v * vw[i / width.max(1)]).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::MulRows(x, w), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = S::lit(c);
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = S::lit(c);
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn erf(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.erf(), Op::Erf(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    /// `a [.., m, k] x b [k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let k = sb[0];
        let n = sb[1];
        let rows = numel(&sa) / k.max(1);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![S::zero(); rows * n];
        gemm_into(
            MatRef::new(self.value(a).data(), rows, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            S::zero(),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Batched `a [g.., m, k] x b [g.., k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a [g.., m, k] x b[g.., n, k]^T`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        let mismatch = || TensorError::ShapeMismatch { op: "bmm", lhs: sa.clone(), rhs: sb.clone() };
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(mismatch());
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(mismatch());
        }
        let groups = numel(&sa[..r - 2]);
        let mut out = vec![S::zero(); groups * m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for g in 0..groups {
                let am = MatRef::new(&da[g * m * k..(g + 1) * m * k], m, k);
                let bm = if trans_b {
                    MatRef::new(&db[g * n * k..(g + 1) * n * k], n, k).t()
                } else {
                    MatRef::new(&db[g * k * n..(g + 1) * k * n], k, n)
                };
                gemm_into(am, bm, &mut out[g * m * n..(g + 1) * m * n], S::zero());
            }
        }
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Bmm { a, b, trans_b }, rg))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(), TensorError> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("softmax", x, axis)?;
        let vx = self.value(x);
        let (outer, n, inner) = split_axis(vx.shape(), axis);
        let src = vx.data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = S::neg_infinity();
                for j in 0..n {
                    max = max.max(src[base + j * inner]);
                }
                let mut total = S::zero();
                for j in 0..n {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[base + j * inner] = out[base + j * inner] / total;
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        self.check_axis(if mean { "mean" } else { "sum" }, x, axis)?;
        let vx = self.value(x);
        let (outer, n, inner) = split_axis(vx.shape(), axis);
        let scale = if mean { S::one() / S::lit(n as f64) } else { S::one() };
        let src = vx.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * scale);
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sum { x, axis, scale }, rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(x, axis, true)
    }

    fn reduce_all(&mut self, x: Var, mean: bool) -> Var {
        let vx = self.value(x);
        let n = vx.len();
        let scale = if mean && n > 0 { S::one() / S::lit(n as f64) } else { S::one() };
        let total: S = vx.data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total * scale), Op::SumAll { x, scale }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.reduce_all(x, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.reduce_all(x, true)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs
            .first()
            .ok_or(TensorError::Invalid { op: "concat", msg: "no inputs".into() })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        self.check_axis("slice", x, axis)?;
        let vx = self.value(x);
        let (outer, n, inner) = split_axis(vx.shape(), axis);
        if start + len > n {
            return Err(TensorError::IndexOutOfRange { op: "slice", index: start + len, bound: n });
        }
        let src = vx.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&a| a < shape.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(TensorError::ShapeMismatch { op: "permute", lhs: shape, rhs: axes.to_vec() });
        }
        let offsets = permute_offsets(&shape, axes);
        let src = self.value(x).data();
        let out = offsets.iter().map(|&o| src[o]).collect();
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var, TensorError> {
        let rank = self.shape(x).len();
        if a >= rank || b >= rank {
            return Err(TensorError::InvalidAxis { op: "transpose", axis: a.max(b), rank });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    /// Row lookup: `table [V, F]` indexed by `ids`, output `prefix ++ [F]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var, TensorError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || numel(prefix) != ids.len() {
            return Err(TensorError::ShapeMismatch { op: "gather", lhs: st, rhs: prefix.to_vec() });
        }
        let (rows, width) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange { op: "gather", index: bad, bound: rows });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = prefix.to_vec();
        shape.push(width);
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// `x / sqrt(mean(x^2) + eps)` over the last axis, without gain.
    pub fn rms_norm(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let width = *vx
            .shape()
            .last()
            .ok_or(TensorError::InvalidAxis { op: "rms_norm", axis: 0, rank: 0 })?;
        let eps = S::lit(eps);
        let n = S::lit(width as f64);
        let mut out = Vec::with_capacity(vx.len());
        let mut inv_rms = Vec::with_capacity(vx.len() / width.max(1));
        for row in vx.data().chunks(width.max(1)) {
            let ms = row.iter().map(|&v| v * v).sum::<S>() / n;
            let r = S::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().map(|&v| v * r));
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::RmsNorm { x, inv_rms }, rg))
    }

    /// Rotary embedding on `x [.., S, H, D]` with `cos`/`sin` tables of
    /// shape `[S, D/2]`. Feature `i` is paired with `i + D/2`.
    pub fn rotary(&mut self, x: Var, cos: &Tensor<S>, sin: &Tensor<S>) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let r = sx.len();
        let bad = || TensorError::ShapeMismatch { op: "rotary", lhs: sx.clone(), rhs: cos.shape().to_vec() };
        if r < 3 || sx[r - 1] % 2 != 0 || cos.shape() != sin.shape() {
            return Err(bad());
        }
        let (seq, heads, dim) = (sx[r - 3], sx[r - 2], sx[r - 1]);
        let half = dim / 2;
        if cos.shape() != [seq, half] {
            return Err(bad());
        }
        let src = self.value(x).data();
        let mut out = vec![S::zero(); src.len()];
        for (row, (xs, ys)) in src.chunks(dim).zip(out.chunks_mut(dim)).enumerate() {
            let pos = (row / heads) % seq;
            let (c, s) = (&cos.data()[pos * half..][..half], &sin.data()[pos * half..][..half]);
            for i in 0..half {
                let (x1, x2) = (xs[i], xs[i + half]);
                ys[i] = x1 * c[i] - x2 * s[i];
                ys[i + half] = x1 * s[i] + x2 * c[i];
            }
        }
        let rg = self.rg(&[x]);
        let op = Op::Rotary { x, cos: cos.data().into(), sin: sin.data().into() };
        Ok(self.push(Tensor::new(sx.clone(), out)?, op, rg))
    }

    /// Mean token cross-entropy of `logits [.., V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let n = targets.len().max(1) as f64;
        let weights = vec![1.0 / n; targets.len()];
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// `sum_i w_i * CE(logits_i, targets_i)` over rows of `logits [.., V]`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        let sl = self.shape(logits).to_vec();
        let vocab = *sl.last().ok_or(TensorError::NotScalar { shape: sl.clone() })?;
        let rows = numel(&sl) / vocab.max(1);
        if rows != targets.len() || rows != weights.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: sl,
                rhs: vec![targets.len(), weights.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: bad, bound: vocab });
        }
        let src = self.value(logits).data();
        let mut total = S::zero();
        for ((row, &t), &w) in src.chunks(vocab).zip(targets).zip(weights) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            total = total + S::lit(w) * (lse - row[t]);
        }
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.iter().map(|&w| S::lit(w)).collect(),
        };
        Ok(self.push(Tensor::scalar(total), op, rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        // Runs `f` on the gradient buffer of `v` if it participates in differentiation.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    d.iter_mut().zip(g).zip(vb).for_each(|((d, &g), &b)| *d = *d + g * b)
                });
                acc(*b, &mut |d| {
                    d.iter_mut().zip(g).zip(va).for_each(|((d, &g), &a)| *d = *d + g * a)
                });
            }
            Op::AddBias(x, b) => {
                let width = nodes[b.0].value.len();
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for chunk in g.chunks(width) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::MulBias(x, b) => {
                let (vx, vb) = (val(*x), val(*b));
                let width = vb.len();
                acc(*x, &mut |d| {
                    for (i, (d, &g)) in d.iter_mut().zip(g).enumerate() {
                        *d = *d + g * vb[i % width];
                    }
                });
                acc(*b, &mut |d| {
                    for (i, (&g, &x)) in g.iter().zip(vx).enumerate() {
                        d[i % width] = d[i % width] + g * x;
                    }
                });
            }
            Op::MulRows(x, w) => {
                let (vx, vw) = (val(*x), val(*w));
                let width = *nodes[x.0].value.shape().last().unwrap_or(&1);
                let width = width.max(1);
                acc(*x, &mut |d| {
                    for (i, (d, &g)) in d.iter_mut().zip(g).enumerate() {
                        *d = *d + g * vw[i / width];
                    }
                });
                acc(*w, &mut |d| {
                    for (r, (gr, xr)) in g.chunks(width).zip(vx.chunks(width)).enumerate() {
                        let dot = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<S>();
                        d[r] = d[r] + dot;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *c));
            }
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                    *d = *d + g * y * (S::one() - y);
                }
            }),
            Op::Erf(x) => {
                let vx = val(*x);
                let k = S::lit(2.0 / std::f64::consts::PI.sqrt());
                acc(*x, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(vx) {
                        *d = *d + g * k * (-x * x).exp();
                    }
                });
            }
            Op::Silu(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(vx) {
                        let s = sigmoid(x);
                        *d = *d + g * s * (S::one() + x * (S::one() - s));
                    }
                });
            }
            Op::MatMul(a, b) => {
                let sb = nodes[b.0].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let rows = nodes[a.0].value.len() / k.max(1);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    gemm_into(MatRef::new(g, rows, n), MatRef::new(vb, k, n).t(), d, S::one())
                });
                acc(*b, &mut |d| {
                    gemm_into(MatRef::new(va, rows, k).t(), MatRef::new(g, rows, n), d, S::one())
                });
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = *node.value.shape().last().unwrap();
                let groups = numel(&sa[..r - 2]);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for gi in 0..groups {
                        let gm = MatRef::new(&g[gi * m * n..][..m * n], m, n);
                        let bm = &vb[gi * k * n..][..k * n];
                        // dA = dC B^T, or dC B when B was transposed.
                        let bm = if *trans_b { MatRef::new(bm, n, k) } else { MatRef::new(bm, k, n).t() };
                        gemm_into(gm, bm, &mut d[gi * m * k..][..m * k], S::one());
                    }
                });
                acc(*b, &mut |d| {
                    for gi in 0..groups {
                        let gm = MatRef::new(&g[gi * m * n..][..m * n], m, n);
                        let am = MatRef::new(&va[gi * m * k..][..m * k], m, k);
                        let out = &mut d[gi * k * n..][..k * n];
                        if *trans_b {
                            gemm_into(gm.t(), am, out, S::one());
                        } else {
                            gemm_into(am.t(), gm, out, S::one());
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dot = (0..n)
                                .map(|j| g[base + j * inner] * y[base + j * inner])
                                .sum::<S>();
                            for j in 0..n {
                                let p = base + j * inner;
                                d[p] = d[p] + y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum { x, axis, scale } => {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for j in 0..n {
                            let dst = &mut d[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, &g) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d = *d + g * *scale;
                            }
                        }
                    }
                });
            }
            Op::SumAll { x, scale } => {
                let gs = g[0] * *scale;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + gs));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = nodes[v.0].value.shape()[*axis];
                    acc(v, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..n * inner];
                            add_into(&mut d[o * n * inner..][..n * inner], src);
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * n + start) * inner..][..len * inner];
                        add_into(dst, &g[o * len * inner..][..len * inner]);
                    }
                });
            }
            Op::Permute { x, axes } => {
                let offsets = permute_offsets(nodes[x.0].value.shape(), axes);
                acc(*x, &mut |d| {
                    for (&o, &g) in offsets.iter().zip(g) {
                        d[o] = d[o] + g;
                    }
                });
            }
            Op::Gather { table, ids } => {
                let width = nodes[table.0].value.shape()[1];
                acc(*table, &mut |d| {
                    for (&i, gr) in ids.iter().zip(g.chunks(width)) {
                        add_into(&mut d[i * width..(i + 1) * width], gr);
                    }
                });
            }
            Op::RmsNorm { x, inv_rms } => {
                let width = *node.value.shape().last().unwrap();
                let n = S::lit(width as f64);
                acc(*x, &mut |d| {
                    for (((dr, gr), yr), &r) in
                        d.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)).zip(inv_rms)
                    {
                        let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>() / n;
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + r * (g - y * dot);
                        }
                    }
                });
            }
            Op::Rotary { x, cos, sin } => {
                let s = node.value.shape();
                let r = s.len();
                let (seq, heads, dim) = (s[r - 3], s[r - 2], s[r - 1]);
                let half = dim / 2;
                acc(*x, &mut |d| {
                    for (row, (dr, gr)) in d.chunks_mut(dim).zip(g.chunks(dim)).enumerate() {
                        let pos = (row / heads) % seq;
                        let (c, sn) = (&cos[pos * half..][..half], &sin[pos * half..][..half]);
                        for i in 0..half {
                            let (g1, g2) = (gr[i], gr[i + half]);
                            dr[i] = dr[i] + g1 * c[i] + g2 * sn[i];
                            dr[i + half] = dr[i + half] - g1 * sn[i] + g2 * c[i];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights } => {
                let vl = val(*logits);
                let vocab = *nodes[logits.0].value.shape().last().unwrap();
                acc(*logits, &mut |d| {
                    for (((dr, row), &t), &w) in
                        d.chunks_mut(vocab).zip(vl.chunks(vocab)).zip(targets).zip(weights)
                    {
                        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                        let total = row.iter().map(|&v| (v - max).exp()).sum::<S>();
                        let scale = g[0] * w;
                        for (j, (d, &v)) in dr.iter_mut().zip(row).enumerate() {
                            let p = (v - max).exp() / total;
                            let onehot = if j == t { S::one() } else { S::zero() };
                            *d = *d + scale * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}
