//! Reverse-mode differentiation over small dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass in evaluation order.
//! [`Tape::backward`] walks the record in reverse and returns the gradient of a
//! scalar node with respect to every parameter the pass touched. Parameters are
//! borrowed from a [`ParamStore`]; nothing on the tape mutates them.

use std::collections::HashMap;

use crate::error::{KredError, Result};

use super::tensor::{dot, matmul_into, softmax_in_place};
use super::{Gradients, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    ParamRow(ParamId, usize),
    MatVec(Var, Var),
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    Dot(Var, Var),
    Stack(Vec<Var>),
    WeightedSum(Var, Vec<Var>),
    Mean(Vec<Var>),
    Sum(Vec<Var>),
    Cosine(Var, Var),
    NllSoftmax {
        logits: Var,
        target: usize,
        temperature: f64,
        probs: Vec<f64>,
    },
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    rows: HashMap<(ParamId, usize), Var>,
    flops: u64,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            rows: HashMap::new(),
            flops: 0,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Number of recorded nodes.
    pub fn op_count(&self) -> usize {
        self.nodes.len()
    }

    /// Multiply-add count of the forward pass so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Row `row` of a rank-2 parameter, as a vector (embedding lookup).
    pub fn param_row(&mut self, id: ParamId, row: usize) -> Result<Var> {
        if let Some(&v) = self.rows.get(&(id, row)) {
            return Ok(v);
        }
        let table = self.store.value(id);
        if table.rank() != 2 || row >= table.rows() {
            return Err(KredError::Lookup(format!(
                "row {row} of `{}` with shape {:?}",
                self.store.name(id),
                table.shape()
            )));
        }
        let value = Tensor::vector(table.row(row).to_vec());
        let v = self.push(Op::ParamRow(id, row), value);
        self.rows.insert((id, row), v);
        Ok(v)
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wt, xt) = (self.value(w), self.value(x));
        if wt.rank() != 2 || xt.rank() != 1 || wt.shape()[1] != xt.len() {
            return Err(KredError::dim("matvec", wt.shape(), xt.shape()));
        }
        let (m, n) = (wt.shape()[0], wt.shape()[1]);
        let out: Vec<f64> = (0..m).map(|i| dot(wt.row(i), xt.data())).collect();
        self.flops += (m * n) as u64;
        Ok(self.push(Op::MatVec(w, x), Tensor::vector(out)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
        self.flops += (m * k * out.shape()[1]) as u64;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(KredError::dim("add", at.shape(), bt.shape()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(at.shape().to_vec(), data)?;
        self.flops += out.len() as u64;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.flops += out.len() as u64;
        self.push(Op::Scale(a, c), out)
    }

    /// W·x + b
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let y = self.matvec(w, x)?;
        self.add(y, b)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(KredError::dim("concat", t.shape(), &[]));
            }
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(data)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.flops += out.len() as u64;
        self.push(Op::Relu(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).tanh();
        self.flops += out.len() as u64;
        self.push(Op::Tanh(a), out)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || t.is_empty() {
            return Err(KredError::dim("softmax", t.shape(), &[]));
        }
        let mut data = t.data().to_vec();
        softmax_in_place(&mut data);
        self.flops += data.len() as u64;
        Ok(self.push(Op::Softmax(a), Tensor::vector(data)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(KredError::dim("dot", at.shape(), bt.shape()));
        }
        let v = dot(at.data(), bt.data());
        self.flops += at.len() as u64;
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(v)))
    }

    /// Collects scalar nodes into one vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let t = self.value(s);
            if t.len() != 1 {
                return Err(KredError::dim("stack", t.shape(), &[]));
            }
            data.push(t.item());
        }
        Ok(self.push(Op::Stack(scalars.to_vec()), Tensor::vector(data)))
    }

    /// Σ weights[i] · items[i]
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let wt = self.value(weights);
        if wt.len() != items.len() || items.is_empty() {
            return Err(KredError::dim("weighted_sum", wt.shape(), &[items.len()]));
        }
        let dim = self.value(items[0]).len();
        let mut out = vec![0.0; dim];
        for (i, &item) in items.iter().enumerate() {
            let it = self.value(item);
            if it.len() != dim {
                return Err(KredError::dim("weighted_sum", &[dim], it.shape()));
            }
            let w = wt.data()[i];
            for (o, v) in out.iter_mut().zip(it.data()) {
                *o += w * v;
            }
        }
        self.flops += (dim * items.len()) as u64;
        Ok(self.push(Op::WeightedSum(weights, items.to_vec()), Tensor::vector(out)))
    }

    pub fn mean(&mut self, items: &[Var]) -> Result<Var> {
        let sum = self.sum_values("mean", items)?;
        let n = items.len() as f64;
        let out = Tensor::vector(sum.into_iter().map(|v| v / n).collect());
        Ok(self.push(Op::Mean(items.to_vec()), out))
    }

    pub fn sum(&mut self, items: &[Var]) -> Result<Var> {
        let shape = self.value(items[0]).shape().to_vec();
        let sum = self.sum_values("sum", items)?;
        let out = Tensor::new(shape, sum)?;
        Ok(self.push(Op::Sum(items.to_vec()), out))
    }

    fn sum_values(&mut self, op: &'static str, items: &[Var]) -> Result<Vec<f64>> {
        let Some(&first) = items.first() else {
            return Err(KredError::dim(op, &[0], &[]));
        };
        let shape = self.value(first).shape().to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &item in items {
            let it = self.value(item);
            if it.shape() != shape.as_slice() {
                return Err(KredError::dim(op, &shape, it.shape()));
            }
            for (o, v) in out.iter_mut().zip(it.data()) {
                *o += v;
            }
        }
        self.flops += (out.len() * items.len()) as u64;
        Ok(out)
    }

    /// Cosine similarity; defined as 0 when either operand is the zero vector.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(KredError::dim("cosine", at.shape(), bt.shape()));
        }
        let na = dot(at.data(), at.data()).sqrt();
        let nb = dot(bt.data(), bt.data()).sqrt();
        let c = if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot(at.data(), bt.data()) / (na * nb)).clamp(-1.0, 1.0)
        };
        self.flops += 3 * at.len() as u64;
        Ok(self.push(Op::Cosine(a, b), Tensor::scalar(c)))
    }

    /// −log softmax(temperature · logits)[target], computed in log-sum-exp form.
    pub fn nll_softmax(&mut self, logits: Var, target: usize, temperature: f64) -> Result<Var> {
        let lt = self.value(logits);
        if lt.rank() != 1 || target >= lt.len() {
            return Err(KredError::dim("nll_softmax", lt.shape(), &[target]));
        }
        let scaled: Vec<f64> = lt.data().iter().map(|v| v * temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - scaled[target];
        let mut probs = scaled;
        softmax_in_place(&mut probs);
        self.flops += 2 * probs.len() as u64;
        Ok(self.push(
            Op::NllSoftmax {
                logits,
                target,
                temperature,
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = dot(t.data(), t.data());
        self.flops += t.len() as u64;
        self.push(Op::SumSquares(a), Tensor::scalar(v))
    }

    /// Gradient of the scalar node `loss` with respect to every parameter reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(KredError::dim("backward", self.value(loss).shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new(self.store.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    let slot = out.slot(*id, g.len());
                    axpy(slot, 1.0, &g);
                }
                Op::ParamRow(id, row) => {
                    let table = self.store.value(*id);
                    let cols = table.cols();
                    let slot = out.slot(*id, table.len());
                    axpy(&mut slot[row * cols..(row + 1) * cols], 1.0, &g);
                }
                Op::MatVec(w, x) => {
                    let (wt, xt) = (self.value(*w), self.value(*x));
                    let n = xt.len();
                    let gw = acc(&mut grads, *w, wt.len());
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            axpy(&mut gw[r * n..(r + 1) * n], gr, xt.data());
                        }
                    }
                    let gx = acc(&mut grads, *x, n);
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            axpy(gx, gr, wt.row(r));
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                    let bt_t = transpose(bt.data(), k, n);
                    let at_t = transpose(at.data(), m, k);
                    let ga = acc(&mut grads, *a, m * k);
                    matmul_into(&g, &bt_t, ga, m, n, k);
                    let gb = acc(&mut grads, *b, k * n);
                    matmul_into(&at_t, &g, gb, k, m, n);
                }
                Op::Add(a, b) => {
                    axpy(acc(&mut grads, *a, g.len()), 1.0, &g);
                    axpy(acc(&mut grads, *b, g.len()), 1.0, &g);
                }
                Op::Scale(a, c) => axpy(acc(&mut grads, *a, g.len()), *c, &g),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        axpy(acc(&mut grads, *p, n), 1.0, &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Relu(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        if *yi > 0.0 {
                            *o += gi;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    let inner = dot(&g, y);
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *o += yi * (gi - inner);
                    }
                }
                Op::Dot(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    axpy(acc(&mut grads, *a, at.len()), g[0], bt.data());
                    axpy(acc(&mut grads, *b, bt.len()), g[0], at.data());
                }
                Op::Stack(scalars) => {
                    for (s, gi) in scalars.iter().zip(&g) {
                        acc(&mut grads, *s, 1)[0] += gi;
                    }
                }
                Op::WeightedSum(w, items) => {
                    let wt = self.value(*w).data().to_vec();
                    let gw: Vec<f64> = items.iter().map(|it| dot(&g, self.value(*it).data())).collect();
                    axpy(acc(&mut grads, *w, wt.len()), 1.0, &gw);
                    for (it, wi) in items.iter().zip(wt) {
                        axpy(acc(&mut grads, *it, g.len()), wi, &g);
                    }
                }
                Op::Mean(items) => {
                    let c = 1.0 / items.len() as f64;
                    for it in items {
                        axpy(acc(&mut grads, *it, g.len()), c, &g);
                    }
                }
                Op::Sum(items) => {
                    for it in items {
                        axpy(acc(&mut grads, *it, g.len()), 1.0, &g);
                    }
                }
                Op::Cosine(a, b) => {
                    let (at, bt) = (self.value(*a).data(), self.value(*b).data());
                    let na = dot(at, at).sqrt();
                    let nb = dot(bt, bt).sqrt();
                    if na > 0.0 && nb > 0.0 {
                        let c = node.value.as_ref().unwrap().item();
                        let ga: Vec<f64> = at
                            .iter()
                            .zip(bt)
                            .map(|(x, y)| g[0] * (y / (na * nb) - c * x / (na * na)))
                            .collect();
                        let gb: Vec<f64> = at
                            .iter()
                            .zip(bt)
                            .map(|(x, y)| g[0] * (x / (na * nb) - c * y / (nb * nb)))
                            .collect();
                        axpy(acc(&mut grads, *a, ga.len()), 1.0, &ga);
                        axpy(acc(&mut grads, *b, gb.len()), 1.0, &gb);
                    }
                }
                Op::NllSoftmax {
                    logits,
                    target,
                    temperature,
                    probs,
                } => {
                    let gl = acc(&mut grads, *logits, probs.len());
                    for (j, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let indicator = if j == *target { 1.0 } else { 0.0 };
                        *o += g[0] * temperature * (p - indicator);
                    }
                }
                Op::SumSquares(a) => {
                    let at = self.value(*a);
                    axpy(acc(&mut grads, *a, at.len()), 2.0 * g[0], at.data());
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}
