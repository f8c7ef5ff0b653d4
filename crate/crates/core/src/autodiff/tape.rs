use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Embedding { table: Var, indices: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    Scale(Var, f64),
    SparseCe { logits: Var, target: usize, probs: Vec<f64> },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Split `shape` around `axis` into (outer, axis length, inner) extents.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `log(sum(exp(z)))` with max subtraction.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax of a slice with max subtraction.
pub fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Records primitive operations for reverse-mode differentiation.
///
/// Parameters are borrowed for the lifetime of the tape and identified by
/// registration order; [`Tape::backward`] returns one gradient per
/// registered parameter in that order.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: Vec<usize>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn push(&mut self, value: Value<'p>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Value::Owned(value), op, rg)
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Value::Owned(value), Op::Input, false)
    }

    /// A trainable tensor. Its parameter id is the number of parameters
    /// registered before it.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        let id = self.params.len();
        let v = self.push(Value::Borrowed(value), Op::Param(id), true);
        self.params.push(v.0);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    /// First element of a value; for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (ta.dims2(), tb.dims2()) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    left: ta.shape().to_vec(),
                    right: tb.shape().to_vec(),
                })
            }
        };
        debug_assert_eq!(k, k2);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += s * bv;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(t, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.derived(t, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.derived(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        self.derived(t, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.derived(t, Op::Sigmoid(x), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.map(x, |v| v * factor);
        self.derived(t, Op::Scale(x, factor), &[x])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() {
            return Err(Error::Shape {
                op: "softmax",
                left: t.shape().to_vec(),
                right: vec![axis],
            });
        }
        let (outer, len, inner) = lanes(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        let mut lane = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, l) in lane.iter_mut().enumerate() {
                    *l = src[base + j * inner];
                }
                for (j, p) in softmax_slice(&lane).into_iter().enumerate() {
                    out[base + j * inner] = p;
                }
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.derived(t, Op::Softmax { x, axis }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::data("concat needs at least one operand"))?;
        let base_shape = self.value(*first).shape().to_vec();
        if axis >= base_shape.len() {
            return Err(Error::Shape {
                op: "concat",
                left: base_shape,
                right: vec![axis],
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    left: base_shape,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let (outer, _, inner) = lanes(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `len` entries of `x` along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                left: shape.to_vec(),
                right: vec![axis, start, len],
            });
        }
        let (outer, full, inner) = lanes(shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let t = Tensor::new(new_shape, out)?;
        Ok(self.derived(t, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2().ok_or_else(|| Error::Shape {
            op: "transpose",
            left: t.shape().to_vec(),
            right: vec![2],
        })?;
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.derived(t, Op::Transpose(x), &[x]))
    }

    /// Rows of a `[V, d]` table, stacked into `[indices.len(), d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.dims2().ok_or_else(|| Error::Shape {
            op: "embedding_lookup",
            left: t.shape().to_vec(),
            right: vec![indices.len()],
        })?;
        if indices.is_empty() {
            return Err(Error::data("embedding_lookup needs at least one index"));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::Index { index: i, size: v });
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![indices.len(), d], out)?;
        Ok(self.derived(
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    /// Inverted dropout. Identity (same handle) when `train` is false or
    /// `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate must lie in [0,1), got {rate}")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.derived(t, Op::Dropout { x, mask }, &[x]))
    }

    /// `-log softmax(logits)[target]` over all elements of `logits`.
    pub fn sparse_ce(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if target >= z.len() {
            return Err(Error::Index {
                index: target,
                size: z.len(),
            });
        }
        let loss = log_sum_exp(z) - z[target];
        let probs = softmax_slice(z);
        Ok(self.derived(
            Tensor::scalar(loss),
            Op::SparseCe {
                logits,
                target,
                probs,
            },
            &[logits],
        ))
    }

    /// Gradients of `loss` with respect to every registered parameter, in
    /// registration order. Unreached parameters get zeros.
    pub fn backward(&self, loss: Var) -> Result<Vec<Tensor>> {
        let mut acc: Vec<Tensor> = self
            .params
            .iter()
            .map(|&i| Tensor::zeros(self.nodes[i].value.get().shape()))
            .collect();
        self.backward_into(loss, &mut acc)?;
        Ok(acc)
    }

    /// Like [`Tape::backward`] but adds into caller-owned accumulators.
    pub fn backward_into(&self, loss: Var, acc: &mut [Tensor]) -> Result<()> {
        self.backward_traced(loss, acc, None)
    }

    /// Node indices visited by the backward sweep, in visit order.
    pub fn backward_trace(&self, loss: Var) -> Result<Vec<usize>> {
        let mut acc: Vec<Tensor> = self
            .params
            .iter()
            .map(|&i| Tensor::zeros(self.nodes[i].value.get().shape()))
            .collect();
        let mut trace = Vec::new();
        self.backward_traced(loss, &mut acc, Some(&mut trace))?;
        Ok(trace)
    }

    fn backward_traced(&self, loss: Var, acc: &mut [Tensor], mut trace: Option<&mut Vec<usize>>) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                left: lt.shape().to_vec(),
                right: vec![1],
            });
        }
        if acc.len() != self.params.len() {
            return Err(Error::data(format!(
                "expected {} gradient accumulators, got {}",
                self.params.len(),
                acc.len()
            )));
        }
        for (a, &i) in acc.iter().zip(&self.params) {
            let shape = self.nodes[i].value.get().shape();
            if a.shape() != shape {
                return Err(Error::Shape {
                    op: "backward accumulator",
                    left: a.shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
        }

        let mut sink = Sink {
            nodes: &self.nodes,
            grads: (0..=loss.0).map(|_| None).collect(),
            acc,
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        sink.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = sink.grads[idx].take() else {
                continue;
            };
            if let Some(t) = trace.as_deref_mut() {
                t.push(idx);
            }
            let node = &self.nodes[idx];
            let out = node.value.get();
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2().expect("rank 2");
                    let n = tb.shape()[1];
                    let (ad, bd) = (ta.data(), tb.data());
                    if let Some(ga) = sink.target(*a) {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    if let Some(gb) = sink.target(*b) {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let s = ad[i * k + p];
                                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += s * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(t) = sink.target(v) {
                            t.iter_mut().zip(&g).for_each(|(o, gv)| *o += gv);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    if let Some(t) = sink.target(*a) {
                        for ((o, gv), bv) in t.iter_mut().zip(&g).zip(bd) {
                            *o += gv * bv;
                        }
                    }
                    if let Some(t) = sink.target(*b) {
                        for ((o, gv), av) in t.iter_mut().zip(&g).zip(ad) {
                            *o += gv * av;
                        }
                    }
                }
                Op::Tanh(x) => {
                    if let Some(t) = sink.target(*x) {
                        for ((o, gv), y) in t.iter_mut().zip(&g).zip(out.data()) {
                            *o += gv * (1.0 - y * y);
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if let Some(t) = sink.target(*x) {
                        for ((o, gv), y) in t.iter_mut().zip(&g).zip(out.data()) {
                            *o += gv * y * (1.0 - y);
                        }
                    }
                }
                Op::Scale(x, f) => {
                    if let Some(t) = sink.target(*x) {
                        t.iter_mut().zip(&g).for_each(|(o, gv)| *o += gv * f);
                    }
                }
                Op::Sum(x) => {
                    if let Some(t) = sink.target(*x) {
                        t.iter_mut().for_each(|o| *o += g[0]);
                    }
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = lanes(out.shape(), *axis);
                    let y = out.data();
                    if let Some(t) = sink.target(*x) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                                for j in 0..len {
                                    let at = base + j * inner;
                                    t[at] += y[at] * (g[at] - dot);
                                }
                            }
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let (outer, _, inner) = lanes(out.shape(), *axis);
                    let mut offset = 0;
                    let full = out.shape()[*axis] * inner;
                    for &p in parts {
                        let block = self.value(p).shape()[*axis] * inner;
                        if let Some(t) = sink.target(p) {
                            for o in 0..outer {
                                let src = &g[o * full + offset..o * full + offset + block];
                                t[o * block..(o + 1) * block]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, s)| *d += s);
                            }
                        }
                        offset += block;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let full_shape = self.value(*x).shape();
                    let (outer, full, inner) = lanes(full_shape, *axis);
                    let len = out.shape()[*axis];
                    if let Some(t) = sink.target(*x) {
                        for o in 0..outer {
                            let base = (o * full + start) * inner;
                            let src = &g[o * len * inner..(o + 1) * len * inner];
                            t[base..base + len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                }
                Op::Transpose(x) => {
                    let (c, r) = out.dims2().expect("rank 2");
                    if let Some(t) = sink.target(*x) {
                        for i in 0..r {
                            for j in 0..c {
                                t[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::Embedding { table, indices } => {
                    let d = out.shape()[1];
                    if let Some(t) = sink.target(*table) {
                        for (row, &i) in indices.iter().enumerate() {
                            t[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(&g[row * d..(row + 1) * d])
                                .for_each(|(o, gv)| *o += gv);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if let Some(t) = sink.target(*x) {
                        for ((o, gv), m) in t.iter_mut().zip(&g).zip(mask) {
                            *o += gv * m;
                        }
                    }
                }
                Op::SparseCe { logits, target, probs } => {
                    if let Some(t) = sink.target(*logits) {
                        for (j, (o, p)) in t.iter_mut().zip(probs).enumerate() {
                            let onehot = if j == *target { 1.0 } else { 0.0 };
                            *o += g[0] * (p - onehot);
                        }
                    }
                }
            }
        }

        for (id, a) in sink.acc.iter().enumerate() {
            if let Some(pos) = a.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {id} at element {pos}")));
            }
        }
        Ok(())
    }
}

struct Sink<'a, 'p> {
    nodes: &'a [Node<'p>],
    grads: Vec<Option<Vec<f64>>>,
    acc: &'a mut [Tensor],
}

impl Sink<'_, '_> {
    /// Gradient buffer for `v`: the caller's accumulator for parameters, a
    /// lazily zeroed per-node buffer otherwise, `None` for constants.
    fn target(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        match node.op {
            Op::Param(id) => Some(self.acc[id].data_mut()),
            _ => {
                let len = node.value.get().len();
                Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
            }
        }
    }
}
