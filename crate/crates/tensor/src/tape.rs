//! Wengert-list recorder and reverse sweep.
//!
//! Every op appends one node holding its forward value. Nodes whose inputs
//! are all constants are recorded without a backward rule, so inference
//! graphs carry no gradient bookkeeping.

use std::collections::BTreeMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<E> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, E),
    AddScalar(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, xhat: Vec<E>, inv_std: Vec<E> },
    Gelu { x: Var, th: Vec<E> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Embedding { table: Var, indices: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

impl<E> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Embedding { .. } => "embedding",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "mse",
        }
    }
}

#[derive(Debug)]
struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Layer-norm epsilon, applied to the variance.
pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Records a single forward graph. Not shared between threads; independent
/// graphs are independent tapes.
#[derive(Debug, Default)]
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    params: BTreeMap<String, Var>,
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<E> {
    grads: Vec<Option<Vec<E>>>,
    shapes: Vec<Vec<usize>>,
    named: BTreeMap<String, Var>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, var: Var) -> Option<Tensor<E>> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Parameter name to gradient, for every parameter leaf that requires grad.
    pub fn named(&self) -> BTreeMap<String, Tensor<E>> {
        self.named
            .iter()
            .filter_map(|(name, &v)| self.get(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn accumulate<E: Element>(slot: &mut Option<Vec<E>>, len: usize, f: impl FnOnce(&mut [E])) {
    let buf = slot.get_or_insert_with(|| vec![E::zero(); len]);
    f(buf);
}

fn add_into<E: Element>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Splits a shape around `axis` into (outer, extent, inner) for strided copies.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input without a name.
    pub fn variable(&mut self, value: Tensor<E>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named parameter leaf. Frozen parameters are recorded as constants so
    /// no gradient is ever produced for them.
    pub fn param(&mut self, name: &str, value: Tensor<E>, trainable: bool) -> Var {
        let v = if trainable {
            self.variable(value)
        } else {
            self.constant(value)
        };
        if trainable {
            self.params.insert(name.to_string(), v);
        }
        v
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E,
        op: Op<E>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_check(&self, name: &'static str, x: Var, v: Var) -> Result<()> {
        let (tx, tv) = (self.value(x), self.value(v));
        if tv.len() != tx.last_dim() {
            return Err(mismatch(name, tx.shape(), tv.shape()));
        }
        Ok(())
    }

    /// `x + v` with `v` (one row of length `last_dim(x)`) broadcast over rows.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_check("add_row", x, v)?;
        let (tx, tv) = (self.value(x), self.value(v));
        let d = tv.len();
        let mut data = tx.data().to_vec();
        if d > 0 {
            for row in data.chunks_mut(d) {
                add_into(row, tv.data());
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(x, v), &[x, v])
    }

    /// `x * v` with `v` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_check("mul_row", x, v)?;
        let (tx, tv) = (self.value(x), self.value(v));
        let d = tv.len();
        let mut data = tx.data().to_vec();
        if d > 0 {
            for row in data.chunks_mut(d) {
                for (r, &s) in row.iter_mut().zip(tv.data()) {
                    *r = *r * s;
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, Op::MulRow(x, v), &[x, v])
    }

    pub fn scale(&mut self, x: Var, c: E) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: E) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_nt" } else { "matmul" };
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (n, kb) = if trans_b {
            (tb.shape()[0], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[0])
        };
        if k != kb {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let mut c = vec![E::zero(); m * n];
        let (rsb, csb) = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        E::gemm(
            m,
            k,
            n,
            E::one(),
            ta.data(),
            k as isize,
            1,
            tb.data(),
            rsb,
            csb,
            E::zero(),
            &mut c,
        );
        let out = Tensor::new(vec![m, n], c)?;
        self.push(out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m,k] x [n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        let mut data = tx.data().to_vec();
        if d > 0 {
            for row in data.chunks_mut(d) {
                let max = row.iter().copied().fold(E::neg_infinity(), E::max);
                let mut total = E::zero();
                for v in row.iter_mut() {
                    *v = *v - max;
                }
                E::exp_slice(row);
                for v in row.iter() {
                    total = total + *v;
                }
                let inv = total.recip();
                for v in row.iter_mut() {
                    *v = *v * inv;
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    /// No affine parameters; callers modulate afterwards.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if d == 0 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape: tx.shape().to_vec(),
                msg: "empty last axis".into(),
            });
        }
        let eps = E::from_f64(LAYER_NORM_EPS);
        let inv_d = E::from_f64(1.0 / d as f64);
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        for row in tx.data().chunks(d) {
            let mean = row.iter().copied().sum::<E>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_d;
            let is = (var + eps).sqrt().recip();
            xhat.extend(row.iter().map(|&v| (v - mean) * is));
            inv_std.push(is);
        }
        let out = Tensor::new(tx.shape().to_vec(), xhat.clone())?;
        self.push(out, Op::LayerNorm { x, xhat, inv_std }, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = E::from_f64(GELU_C);
        let a = E::from_f64(GELU_A);
        let half = E::from_f64(0.5);
        let two = E::from_f64(2.0);
        let tx = self.value(x);
        // tanh(u) = 1 - 2 / (exp(2u) + 1)
        let mut th: Vec<E> = tx.data().iter().map(|&v| two * c * (v + a * v * v * v)).collect();
        E::exp_slice(&mut th);
        for t in th.iter_mut() {
            *t = E::one() - two / (*t + E::one());
        }
        let data = tx.data().iter().zip(&th).map(|(&v, &t)| half * v * (E::one() + t)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, Op::Gelu { x, th }, &[x])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: base,
                msg: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        self.push(out, op, parts)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                msg: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        self.push(out, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: t.shape().to_vec(),
                msg: "table must be rank 2".into(),
            });
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: i,
                    extent: vocab,
                });
            }
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        let op = Op::Embedding {
            table,
            indices: indices.to_vec(),
        };
        self.push(out, op, &[table])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<E>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<E>() / E::from_f64(t.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(mismatch("mse", tp.shape(), tt.shape()));
        }
        let n = E::from_f64(tp.len().max(1) as f64);
        let s = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<E>()
            / n;
        self.push(Tensor::scalar(s), Op::Mse(pred, target), &[pred, target])
    }

    /// Reverse sweep from a scalar loss. Every node is visited at most once,
    /// in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![E::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Trainable parameters that do not reach the loss get explicit zeros.
        for &v in self.params.values() {
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![E::zero(); self.nodes[v.0].value.len()]);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            named: self.params.clone(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Reshape(x) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], g.len(), |d| add_into(d, g));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        accumulate(&mut grads[v.0], g.len(), |d| add_into(d, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| add_into(d, g));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.len(), |d| {
                        for (d, &s) in d.iter_mut().zip(g) {
                            *d = *d - s;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for ((d, &s), &y) in d.iter_mut().zip(g).zip(vb) {
                            *d = *d + s * y;
                        }
                    });
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.len(), |d| {
                        for ((d, &s), &x) in d.iter_mut().zip(g).zip(va) {
                            *d = *d + s * x;
                        }
                    });
                }
            }
            Op::AddRow(x, v) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], g.len(), |d| add_into(d, g));
                }
                if wants(*v) {
                    let dlen = len_of(*v);
                    accumulate(&mut grads[v.0], dlen, |d| {
                        for row in g.chunks(dlen) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::MulRow(x, v) => {
                let vv = self.value(*v).data();
                let xv = self.value(*x).data();
                let dlen = vv.len();
                if wants(*x) {
                    accumulate(&mut grads[x.0], g.len(), |d| {
                        for (drow, grow) in d.chunks_mut(dlen).zip(g.chunks(dlen)) {
                            for ((d, &s), &m) in drow.iter_mut().zip(grow).zip(vv) {
                                *d = *d + s * m;
                            }
                        }
                    });
                }
                if wants(*v) {
                    accumulate(&mut grads[v.0], dlen, |d| {
                        for (grow, xrow) in g.chunks(dlen).zip(xv.chunks(dlen)) {
                            for ((d, &s), &xe) in d.iter_mut().zip(grow).zip(xrow) {
                                *d = *d + s * xe;
                            }
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], g.len(), |d| {
                        for (d, &s) in d.iter_mut().zip(g) {
                            *d = *d + s * *c;
                        }
                    });
                }
            }
            Op::AddScalar(x) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], g.len(), |d| add_into(d, g));
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = if *trans_b { tb.shape()[0] } else { tb.shape()[1] };
                if wants(*a) {
                    // dA[m,k] = G[m,n] * op(B)^T
                    let (rsb, csb) = if *trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    accumulate(&mut grads[a.0], m * k, |d| {
                        E::gemm(
                            m,
                            n,
                            k,
                            E::one(),
                            g,
                            n as isize,
                            1,
                            tb.data(),
                            rsb,
                            csb,
                            E::one(),
                            d,
                        );
                    });
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], k * n, |d| {
                        if *trans_b {
                            // dB[n,k] = G^T[n,m] * A[m,k]
                            E::gemm(
                                n,
                                m,
                                k,
                                E::one(),
                                g,
                                1,
                                n as isize,
                                ta.data(),
                                k as isize,
                                1,
                                E::one(),
                                d,
                            );
                        } else {
                            // dB[k,n] = A^T[k,m] * G[m,n]
                            E::gemm(
                                k,
                                m,
                                n,
                                E::one(),
                                ta.data(),
                                1,
                                k as isize,
                                g,
                                n as isize,
                                1,
                                E::one(),
                                d,
                            );
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    accumulate(&mut grads[x.0], g.len(), |dst| {
                        for ((drow, grow), yrow) in
                            dst.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d))
                        {
                            let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<E>();
                            for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                                *dv = *dv + yv * (gv - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                if wants(*x) {
                    let d = node.value.last_dim();
                    let inv_d = E::from_f64(1.0 / d as f64);
                    accumulate(&mut grads[x.0], g.len(), |dst| {
                        for (((drow, grow), hrow), &is) in dst
                            .chunks_mut(d)
                            .zip(g.chunks(d))
                            .zip(xhat.chunks(d))
                            .zip(inv_std)
                        {
                            let mg = grow.iter().copied().sum::<E>() * inv_d;
                            let mgh =
                                grow.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<E>() * inv_d;
                            for ((dv, &gv), &hv) in drow.iter_mut().zip(grow).zip(hrow) {
                                *dv = *dv + is * (gv - mg - hv * mgh);
                            }
                        }
                    });
                }
            }
            Op::Gelu { x, th } => {
                if wants(*x) {
                    let c = E::from_f64(GELU_C);
                    let a = E::from_f64(GELU_A);
                    let half = E::from_f64(0.5);
                    let three = E::from_f64(3.0);
                    let xv = self.value(*x).data();
                    accumulate(&mut grads[x.0], g.len(), |dst| {
                        for (((dv, &gv), &v), &th) in dst.iter_mut().zip(g).zip(xv).zip(th) {
                            let du = c * (E::one() + three * a * v * v);
                            let dy = half * (E::one() + th) + half * v * (E::one() - th * th) * du;
                            *dv = *dv + gv * dy;
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let total_chunk = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    let chunk = ext * inner;
                    if wants(p) {
                        accumulate(&mut grads[p.0], outer * chunk, |dst| {
                            for o in 0..outer {
                                let src = &g[o * total_chunk + offset..][..chunk];
                                add_into(&mut dst[o * chunk..(o + 1) * chunk], src);
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                if wants(*x) {
                    let xs = self.shape(*x);
                    let (outer, extent, inner) = axis_split(xs, *axis);
                    let len = node.value.shape()[*axis];
                    accumulate(&mut grads[x.0], outer * extent * inner, |dst| {
                        for o in 0..outer {
                            let base = (o * extent + start) * inner;
                            let src = &g[o * len * inner..(o + 1) * len * inner];
                            add_into(&mut dst[base..base + len * inner], src);
                        }
                    });
                }
            }
            Op::Embedding { table, indices } => {
                if wants(*table) {
                    let t = self.value(*table);
                    let d = t.shape()[1];
                    accumulate(&mut grads[table.0], t.len(), |dst| {
                        for (row, &i) in indices.iter().enumerate() {
                            add_into(&mut dst[i * d..(i + 1) * d], &g[row * d..(row + 1) * d]);
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let s = g[0];
                    accumulate(&mut grads[x.0], len_of(*x), |d| {
                        for v in d.iter_mut() {
                            *v = *v + s;
                        }
                    });
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = len_of(*x);
                    let s = g[0] / E::from_f64(n.max(1) as f64);
                    accumulate(&mut grads[x.0], n, |d| {
                        for v in d.iter_mut() {
                            *v = *v + s;
                        }
                    });
                }
            }
            Op::Mse(p, t) => {
                let (vp, vt) = (self.value(*p).data(), self.value(*t).data());
                let n = vp.len();
                let s = g[0] * E::from_f64(2.0 / n.max(1) as f64);
                if wants(*p) {
                    accumulate(&mut grads[p.0], n, |d| {
                        for ((d, &a), &b) in d.iter_mut().zip(vp).zip(vt) {
                            *d = *d + s * (a - b);
                        }
                    });
                }
                if wants(*t) {
                    accumulate(&mut grads[t.0], n, |d| {
                        for ((d, &a), &b) in d.iter_mut().zip(vp).zip(vt) {
                            *d = *d - s * (a - b);
                        }
                    });
                }
            }
            Op::Leaf => {}
        }
    }
}
