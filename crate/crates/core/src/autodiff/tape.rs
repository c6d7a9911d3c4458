use std::cell::RefCell;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Reduction applied by [`Var::cross_entropy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        a_t: bool,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow {
        x: usize,
        bias: usize,
    },
    Affine {
        x: usize,
        scale: T,
    },
    ScaleBy {
        x: usize,
        s: usize,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(usize),
    Sigmoid(usize),
    Concat {
        parts: Vec<usize>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Narrow {
        x: usize,
        outer: usize,
        len_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    MeanRows {
        x: usize,
        rows: usize,
    },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        probs: Vec<T>,
        targets: Vec<usize>,
        mask: Vec<bool>,
        scale: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run recording of tensor operations. Nodes are appended in
/// execution order, so the node list is always topologically sorted.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.leaf(tensor.with_requires_grad(true))
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Row lookup into an embedding table: output row `r` is `table[ids[r]]`.
    pub fn gather<'t>(&'t self, table: Var<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.id].value;
            if t.rank() != 2 {
                return Err(Error::Shape {
                    op: "gather",
                    lhs: t.shape().to_vec(),
                    rhs: vec![ids.len()],
                });
            }
            let (v, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(Error::Invalid(format!("gather: id {id} out of range for table of {v} rows")));
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::new(vec![ids.len(), d], data)?
        };
        let needs = self.needs(&[table.id]);
        Ok(self.push(
            out,
            Op::Gather {
                table: table.id,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grads`].
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let root = loss.id;
        let mut grads: Vec<Option<Vec<T>>> = {
            let nodes = self.nodes.borrow();
            let root_value = &nodes[root].value;
            if root_value.numel() != 1 {
                return Err(Error::Invalid(format!(
                    "backward: root must be scalar, got shape {:?}",
                    root_value.shape()
                )));
            }
            let mut g: Vec<Option<Vec<T>>> = (0..=root).map(|_| None).collect();
            g[root] = Some(vec![T::one()]);
            g
        };

        let nodes = self.nodes.borrow();
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(&nodes, node, &g, &mut grads);
        }

        let leaf_grads: Vec<(usize, Vec<T>)> = (0..=root)
            .filter(|&id| matches!(nodes[id].op, Op::Leaf) && nodes[id].value.requires_grad())
            .map(|id| {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); nodes[id].value.numel()]);
                (id, g)
            })
            .collect();
        drop(nodes);

        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            nodes[id].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn backprop_node(&self, nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |i: usize| nodes[i].needs_grad;
        let numel = |i: usize| nodes[i].value.numel();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, a_t, b_t, m, k, n } => {
                let av = nodes[a].value.data();
                let bv = nodes[b].value.data();
                if needs(a) {
                    let da = slot(grads, a, m * k);
                    if a_t {
                        T::gemm(k, n, m, bv, b_t, g, true, da, true);
                    } else {
                        T::gemm(m, n, k, g, false, bv, !b_t, da, true);
                    }
                }
                if needs(b) {
                    let db = slot(grads, b, k * n);
                    if b_t {
                        T::gemm(n, m, k, g, true, av, a_t, db, true);
                    } else {
                        T::gemm(k, m, n, av, !a_t, g, false, db, true);
                    }
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if needs(a) {
                    slot(grads, a, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if needs(b) {
                    slot(grads, b, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += sign * v);
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let bv = nodes[b].value.data();
                    let da = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if needs(b) {
                    let av = nodes[a].value.data();
                    let db = slot(grads, b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                if needs(x) {
                    slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if needs(bias) {
                    let n = numel(bias);
                    let db = slot(grads, bias, n);
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            &Op::Affine { x, scale } => {
                if needs(x) {
                    slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += scale * v);
                }
            }
            &Op::ScaleBy { x, s } => {
                let sv = nodes[s].value.data()[0];
                if needs(x) {
                    slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += sv * v);
                }
                if needs(s) {
                    let xv = nodes[x].value.data();
                    let total = g.iter().zip(xv).fold(T::zero(), |acc, (&gi, &xi)| acc + gi * xi);
                    slot(grads, s, 1)[0] += total;
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                if needs(x) {
                    let y = node.value.data();
                    let dx = slot(grads, x, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + i;
                            let dot = (0..len).fold(T::zero(), |acc, a| acc + y[idx(a)] * g[idx(a)]);
                            for a in 0..len {
                                dx[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = numel(*gamma);
                let rows = g.len() / n;
                if needs(*gamma) {
                    let dg = slot(grads, *gamma, n);
                    for r in 0..rows {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if needs(*beta) {
                    let db = slot(grads, *beta, n);
                    for r in 0..rows {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                }
                if needs(*x) {
                    let gv = nodes[*gamma].value.data();
                    let nf = T::lit(n as f64);
                    let dx = slot(grads, *x, g.len());
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..rows {
                        let base = r * n;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..n {
                            dxhat[c] = g[base + c] * gv[c];
                            sum_d += dxhat[c];
                            sum_dx += dxhat[c] * xhat[base + c];
                        }
                        let k = inv_std[r] / nf;
                        for c in 0..n {
                            dx[base + c] += k * (nf * dxhat[c] - sum_d - xhat[base + c] * sum_dx);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if needs(x) {
                    let xv = nodes[x].value.data();
                    let half = T::lit(0.5);
                    let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = T::lit(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
                    let dx = slot(grads, x, g.len());
                    for i in 0..g.len() {
                        let v = xv[i];
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                        dx[i] += g[i] * (cdf + v * pdf);
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if needs(x) {
                    let y = node.value.data();
                    let dx = slot(grads, x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
                lens,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &len) in parts.iter().zip(lens) {
                    if needs(p) {
                        let dp = slot(grads, p, outer * len * inner);
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for i in 0..len * inner {
                                dp[dst + i] += g[src + i];
                            }
                        }
                    }
                    offset += len;
                }
            }
            &Op::Narrow {
                x,
                outer,
                len_in,
                start,
                len,
                inner,
            } => {
                if needs(x) {
                    let dx = slot(grads, x, outer * len_in * inner);
                    for o in 0..outer {
                        let dst = (o * len_in + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            dx[dst + i] += g[src + i];
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let d = nodes[*table].value.cols();
                    let dt = slot(grads, *table, numel(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            &Op::MeanRows { x, rows } => {
                if needs(x) {
                    let c = g.len();
                    let k = T::one() / T::lit(rows as f64);
                    let dx = slot(grads, x, rows * c);
                    for r in 0..rows {
                        for j in 0..c {
                            dx[r * c + j] += g[j] * k;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if needs(x) {
                    let n = numel(x);
                    slot(grads, x, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                mask,
                scale,
            } => {
                if needs(*logits) {
                    let v = nodes[*logits].value.cols();
                    let dl = slot(grads, *logits, probs.len());
                    let k = g[0] * *scale;
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for c in 0..v {
                            dl[r * v + c] += k * probs[r * v + c];
                        }
                        dl[r * v + t] -= k;
                    }
                }
            }
        }
    }

    /// Clears accumulated gradients on every leaf.
    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.value.zero_grad();
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Copy of the forward value (without gradient).
    pub fn value(&self) -> Tensor<T> {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        Tensor::new(v.shape().to_vec(), v.data().to_vec()).expect("consistent tensor")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.tape.nodes.borrow()[self.id].value.data().to_vec()
    }

    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.tape.nodes.borrow()[self.id].value.grad().map(<[T]>::to_vec)
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with2<R>(&self, other: Var<'t, T>, f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'t, T> {
        let needs = self.tape.needs(inputs);
        self.tape.push(value, op, needs)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_ex(other, false, false)
    }

    /// `self * other^T`.
    pub fn matmul_nt(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_ex(other, false, true)
    }

    /// `op(self) * op(other)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_ex(self, other: Var<'t, T>, a_t: bool, b_t: bool) -> Result<Var<'t, T>> {
        let (value, m, k, n) = self.with2(other, |a, b| {
            let shape_err = || Error::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            };
            if a.rank() != 2 || b.rank() != 2 {
                return Err(shape_err());
            }
            let (m, k) = if a_t { (a.shape()[1], a.shape()[0]) } else { (a.shape()[0], a.shape()[1]) };
            let (k2, n) = if b_t { (b.shape()[1], b.shape()[0]) } else { (b.shape()[0], b.shape()[1]) };
            if k != k2 {
                return Err(shape_err());
            }
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, a.data(), a_t, b.data(), b_t, &mut out, false);
            Ok((Tensor::new(vec![m, n], out)?, m, k, n))
        })?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                a_t,
                b_t,
                m,
                k,
                n,
            },
            &[self.id, other.id],
        ))
    }

    fn zip_same(self, other: Var<'t, T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.with2(other, |a, b| {
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    op,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.push(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.push(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.push(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.with2(bias, |x, b| {
            if b.numel() != x.cols() || x.rank() == 0 {
                return Err(Error::Shape {
                    op: "add_row",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let n = b.numel();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(a, &c)| *a += c);
            }
            Tensor::new(x.shape().to_vec(), data)
        })?;
        Ok(self.push(v, Op::AddRow { x: self.id, bias: bias.id }, &[self.id, bias.id]))
    }

    /// `scale * self + shift`, elementwise.
    pub fn affine(self, scale: T, shift: T) -> Var<'t, T> {
        let v = self.with(|x| {
            let data = x.data().iter().map(|&a| scale * a + shift).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same extent")
        });
        self.push(v, Op::Affine { x: self.id, scale }, &[self.id])
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        self.affine(factor, T::zero())
    }

    /// Multiplies every element by a one-element tensor.
    pub fn scale_by(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.with2(s, |x, s| {
            if s.numel() != 1 {
                return Err(Error::Shape {
                    op: "scale_by",
                    lhs: x.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
            let k = s.data()[0];
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&a| a * k).collect())
        })?;
        Ok(self.push(v, Op::ScaleBy { x: self.id, s: s.id }, &[self.id, s.id]))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        self.softmax_impl(axis, false)
    }

    /// Row softmax over the last axis of a rank-2 tensor where query row `i`
    /// only sees columns `j <= i + (cols - rows)`.
    pub fn softmax_causal(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[1] < shape[0] {
            return Err(Error::Invalid(format!("softmax_causal: unsupported shape {shape:?}")));
        }
        self.softmax_impl(1, true)
    }

    fn softmax_impl(self, axis: usize, causal: bool) -> Result<Var<'t, T>> {
        let (value, outer, len, inner) = self.with(|x| {
            if axis >= x.rank() {
                return Err(Error::Axis {
                    op: "softmax",
                    axis,
                    rank: x.rank(),
                });
            }
            let (outer, len, inner) = split_axis(x.shape(), axis);
            let offset = if causal { len - outer } else { 0 };
            let xv = x.data();
            let mut out = vec![T::zero(); xv.len()];
            for o in 0..outer {
                let visible = if causal { (o + offset + 1).min(len) } else { len };
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let max = (0..visible).fold(T::neg_infinity(), |m, a| m.max(xv[idx(a)]));
                    let mut total = T::zero();
                    for a in 0..visible {
                        let e = (xv[idx(a)] - max).exp();
                        out[idx(a)] = e;
                        total += e;
                    }
                    for a in 0..visible {
                        out[idx(a)] /= total;
                    }
                }
            }
            Ok((Tensor::new(x.shape().to_vec(), out)?, outer, len, inner))
        })?;
        Ok(self.push(
            value,
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
            &[self.id],
        ))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id].value;
        let (gv, bv) = (&nodes[gamma.id].value, &nodes[beta.id].value);
        let n = x.cols();
        if n == 0 || x.rank() == 0 {
            return Err(Error::Invalid("layer_norm: zero-length normalization axis".into()));
        }
        if gv.numel() != n || bv.numel() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        if eps <= T::zero() {
            return Err(Error::Invalid("layer_norm: eps must be positive".into()));
        }
        let rows = x.numel() / n;
        let nf = T::lit(n as f64);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = gv.data()[c] * h + bv.data()[c];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        drop(nodes);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    /// Exact GELU, `x * Phi(x)` with the erf form of the normal CDF.
    pub fn gelu(self) -> Var<'t, T> {
        let v = self.with(|x| {
            let half = T::lit(0.5);
            let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
            let data = x
                .data()
                .iter()
                .map(|&a| half * a * (T::one() + (a * inv_sqrt2).erf()))
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("same extent")
        });
        self.push(v, Op::Gelu(self.id), &[self.id])
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.with(|x| {
            let data = x
                .data()
                .iter()
                .map(|&a| {
                    if a >= T::zero() {
                        T::one() / (T::one() + (-a).exp())
                    } else {
                        let e = a.exp();
                        e / (T::one() + e)
                    }
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("same extent")
        });
        self.push(v, Op::Sigmoid(self.id), &[self.id])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (value, outer, len_in, inner) = self.with(|x| {
            if axis >= x.rank() {
                return Err(Error::Axis {
                    op: "narrow",
                    axis,
                    rank: x.rank(),
                });
            }
            let (outer, len_in, inner) = split_axis(x.shape(), axis);
            if start + len > len_in {
                return Err(Error::Invalid(format!(
                    "narrow: range {start}..{} exceeds extent {len_in}",
                    start + len
                )));
            }
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * len_in + start) * inner;
                data.extend_from_slice(&x.data()[from..from + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            Ok((Tensor::new(shape, data)?, outer, len_in, inner))
        })?;
        Ok(self.push(
            value,
            Op::Narrow {
                x: self.id,
                outer,
                len_in,
                start,
                len,
                inner,
            },
            &[self.id],
        ))
    }

    /// Mean over the leading (row) axis of a rank-2 tensor, giving `1 x cols`.
    pub fn mean_rows(self) -> Result<Var<'t, T>> {
        let (value, rows) = self.with(|x| {
            if x.rank() != 2 || x.shape()[0] == 0 {
                return Err(Error::Invalid(format!("mean_rows: unsupported shape {:?}", x.shape())));
            }
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![T::zero(); cols];
            for r in 0..rows {
                out.iter_mut().zip(x.row(r)).for_each(|(o, &v)| *o += v);
            }
            let k = T::one() / T::lit(rows as f64);
            out.iter_mut().for_each(|o| *o *= k);
            Ok((Tensor::new(vec![1, cols], out)?, rows))
        })?;
        Ok(self.push(value, Op::MeanRows { x: self.id, rows }, &[self.id]))
    }

    pub fn sum(self) -> Var<'t, T> {
        let v = self.with(|x| Tensor::scalar(x.data().iter().copied().sum()));
        self.push(v, Op::Sum(self.id), &[self.id])
    }

    /// Token-level cross-entropy of `self` (`T x V` logits) against `targets`,
    /// restricted to positions where `mask` is true.
    pub fn cross_entropy(self, targets: &[usize], mask: &[bool], reduction: Reduction) -> Result<Var<'t, T>> {
        let (value, probs, scale) = self.with(|x| {
            if x.rank() != 2 {
                return Err(Error::Invalid(format!("cross_entropy: logits must be rank 2, got {:?}", x.shape())));
            }
            let (t, v) = (x.shape()[0], x.shape()[1]);
            if targets.len() != t || mask.len() != t {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    lhs: x.shape().to_vec(),
                    rhs: vec![targets.len(), mask.len()],
                });
            }
            let count = mask.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::Invalid("cross_entropy: every position is masked".into()));
            }
            let mut probs = vec![T::zero(); t * v];
            let mut total = T::zero();
            for r in 0..t {
                let row = x.row(r);
                let max = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
                let mut z = T::zero();
                for (c, &a) in row.iter().enumerate() {
                    let e = (a - max).exp();
                    probs[r * v + c] = e;
                    z += e;
                }
                probs[r * v..(r + 1) * v].iter_mut().for_each(|p| *p /= z);
                if mask[r] {
                    let target = targets[r];
                    if target >= v {
                        return Err(Error::Invalid(format!(
                            "cross_entropy: target id {target} out of range for vocabulary {v}"
                        )));
                    }
                    total += max + z.ln() - row[target];
                }
            }
            let scale = match reduction {
                Reduction::Mean => T::one() / T::lit(count as f64),
                Reduction::Sum => T::one(),
            };
            Ok((Tensor::scalar(total * scale), probs, scale))
        })?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: self.id,
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                scale,
            },
            &[self.id],
        ))
    }
}

/// Concatenates along `axis`. All other extents must agree.
pub fn concat<'t, T: Real>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("concat: no inputs".into()))?;
    let tape = first.tape;
    let (value, outer, inner, lens) = {
        let nodes = tape.nodes.borrow();
        let base = nodes[first.id].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = nodes[p.id].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let src = nodes[p.id].value.data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        (Tensor::new(shape, data)?, outer, inner, lens)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let needs = tape.needs(&ids);
    Ok(tape.push(
        value,
        Op::Concat {
            parts: ids,
            outer,
            inner,
            lens,
        },
        needs,
    ))
}
