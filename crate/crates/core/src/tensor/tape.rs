// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every op applied to its [`Var`]s in creation order.
//! [`Tape::backward`] walks the record in reverse, which is a valid reverse
//! topological order because an op can only consume earlier nodes. Tapes
//! are built fresh for every forward pass.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, Segment};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, T),
    Neg(usize),
    Log(usize),
    Gelu(usize),
    LayerNorm(usize, usize, usize),
    SoftmaxRows(usize),
    Sum(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Gather {
        table: usize,
        rows: Vec<usize>,
    },
    ScatterAdd {
        base: usize,
        src: usize,
        rows: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of differentiable ops. Single-threaded by construction.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zero when it did not participate in the loss.
    pub fn wrt(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }

    pub fn take(&mut self, var: &Var<'_, T>) -> Tensor<T> {
        self.grads[var.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

fn broadcast_kind<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.len() == 1 {
        Ok(Broadcast::Scalar)
    } else if b.len() == a.cols() && b.cols() == a.cols() {
        Ok(Broadcast::Row)
    } else {
        Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} do not broadcast",
            a.shape(),
            b.shape()
        )))
    }
}

impl<T: Scalar> Tape<T> {
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

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn owns(&self, var: &Var<'_, T>) -> bool {
        std::ptr::eq(self, var.tape)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if !self.owns(loss) {
            return Err(Error::Graph("loss was not recorded on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if loss.id >= nodes.len() {
            return Err(Error::Graph("loss id outside tape".into()));
        }
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Non-leaf gradients are intermediate; keep them (cheap) for inspection.
        Ok(Gradients { grads, shapes })
    }
}

fn acc<'g, T: Scalar>(
    grads: &'g mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    id: usize,
) -> Option<&'g mut Tensor<T>> {
    if !nodes[id].needs_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape())))
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(ga) = acc(grads, nodes, a) {
                // dA = dC · Bᵀ
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g.data(),
                    n,
                    1,
                    bv.data(),
                    1,
                    n,
                    T::one(),
                    ga.data_mut(),
                    k,
                    1,
                );
            }
            if let Some(gb) = acc(grads, nodes, b) {
                // dB = Aᵀ · dC
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    av.data(),
                    1,
                    k,
                    g.data(),
                    n,
                    1,
                    T::one(),
                    gb.data_mut(),
                    n,
                    1,
                );
            }
        }
        &Op::MatMulT(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            if let Some(ga) = acc(grads, nodes, a) {
                // dA = dC · B
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g.data(),
                    n,
                    1,
                    bv.data(),
                    k,
                    1,
                    T::one(),
                    ga.data_mut(),
                    k,
                    1,
                );
            }
            if let Some(gb) = acc(grads, nodes, b) {
                // dB = dCᵀ · A
                T::gemm(
                    n,
                    m,
                    k,
                    T::one(),
                    g.data(),
                    1,
                    n,
                    av.data(),
                    k,
                    1,
                    T::one(),
                    gb.data_mut(),
                    k,
                    1,
                );
            }
        }
        &Op::Add(a, b, kind) => {
            if let Some(ga) = acc(grads, nodes, a) {
                for (x, &y) in ga.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            if let Some(gb) = acc(grads, nodes, b) {
                reduce_broadcast(gb, g.data(), kind, |_| T::one());
            }
        }
        &Op::Mul(a, b, kind) => {
            let (av, bv) = (Rc::clone(&nodes[a].value), Rc::clone(&nodes[b].value));
            if let Some(ga) = acc(grads, nodes, a) {
                let c = av.cols();
                for (i, x) in ga.data_mut().iter_mut().enumerate() {
                    let bval = match kind {
                        Broadcast::Same => bv.data()[i],
                        Broadcast::Row => bv.data()[i % c],
                        Broadcast::Scalar => bv.data()[0],
                    };
                    *x += g.data()[i] * bval;
                }
            }
            if let Some(gb) = acc(grads, nodes, b) {
                reduce_broadcast(gb, g.data(), kind, |i| av.data()[i]);
            }
        }
        &Op::Scale(a, s) => {
            if let Some(ga) = acc(grads, nodes, a) {
                for (x, &y) in ga.data_mut().iter_mut().zip(g.data()) {
                    *x += y * s;
                }
            }
        }
        &Op::Neg(a) => {
            if let Some(ga) = acc(grads, nodes, a) {
                for (x, &y) in ga.data_mut().iter_mut().zip(g.data()) {
                    *x -= y;
                }
            }
        }
        &Op::Log(a) => {
            let av = Rc::clone(&nodes[a].value);
            if let Some(ga) = acc(grads, nodes, a) {
                for ((x, &y), &v) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *x += y / v;
                }
            }
        }
        &Op::Gelu(a) => {
            let av = Rc::clone(&nodes[a].value);
            if let Some(ga) = acc(grads, nodes, a) {
                for ((x, &y), &v) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *x += y * kernels::gelu_grad(v);
                }
            }
        }
        &Op::LayerNorm(x, gamma, beta) => {
            let xv = Rc::clone(&nodes[x].value);
            let gv = Rc::clone(&nodes[gamma].value);
            let c = xv.cols();
            let need_x = nodes[x].needs_grad;
            let mut dx = vec![T::zero(); if need_x { xv.len() } else { c }];
            let mut dgamma = nodes[gamma].needs_grad.then(|| vec![T::zero(); c]);
            let mut dbeta = nodes[beta].needs_grad.then(|| vec![T::zero(); c]);
            for r in 0..xv.rows() {
                let dx_row = if need_x {
                    &mut dx[r * c..(r + 1) * c]
                } else {
                    // scratch; discarded
                    &mut dx[..c]
                };
                kernels::layernorm_row_backward(
                    xv.row(r),
                    gv.data(),
                    g.row(r),
                    dx_row,
                    dgamma.as_deref_mut(),
                    dbeta.as_deref_mut(),
                );
            }
            if let Some(gx) = acc(grads, nodes, x) {
                add_into(gx.data_mut(), &dx);
            }
            if let (Some(d), Some(gg)) = (dgamma, acc(grads, nodes, gamma)) {
                add_into(gg.data_mut(), &d);
            }
            if let (Some(d), Some(gb)) = (dbeta, acc(grads, nodes, beta)) {
                add_into(gb.data_mut(), &d);
            }
        }
        &Op::SoftmaxRows(a) => {
            if let Some(ga) = acc(grads, nodes, a) {
                let c = out.cols();
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let dy = g.row(r);
                    let s = y
                        .iter()
                        .zip(dy)
                        .fold(T::zero(), |acc, (&p, &d)| acc + p * d);
                    for (j, x) in ga.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
                        *x += y[j] * (dy[j] - s);
                    }
                }
            }
        }
        &Op::Sum(a) => {
            let gv = g.item();
            if let Some(ga) = acc(grads, nodes, a) {
                ga.data_mut().iter_mut().for_each(|x| *x += gv);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let gv = g.item() / T::lit(targets.len() as f64);
            if let Some(gl) = acc(grads, nodes, *logits) {
                let v = gl.cols();
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut gl.data_mut()[r * v..(r + 1) * v];
                    for (j, x) in row.iter_mut().enumerate() {
                        *x += gv * probs[r * v + j];
                    }
                    row[t] -= gv;
                }
            }
        }
        Op::Gather { table, rows } => {
            if let Some(gt) = acc(grads, nodes, *table) {
                let c = gt.cols();
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut gt.data_mut()[r * c..(r + 1) * c];
                    add_into(dst, g.row(i));
                }
            }
        }
        Op::ScatterAdd { base, src, rows } => {
            if let Some(gb) = acc(grads, nodes, *base) {
                add_into(gb.data_mut(), g.data());
            }
            if let Some(gs) = acc(grads, nodes, *src) {
                let c = gs.cols();
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut gs.data_mut()[i * c..(i + 1) * c], g.row(r));
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
            let (qv, kv, vv) = (
                Rc::clone(&nodes[*q].value),
                Rc::clone(&nodes[*k].value),
                Rc::clone(&nodes[*v].value),
            );
            let width = qv.cols();
            let mut dq = vec![T::zero(); qv.len()];
            let mut dk = vec![T::zero(); kv.len()];
            let mut dv = vec![T::zero(); vv.len()];
            kernels::attention_backward(
                qv.data(),
                kv.data(),
                vv.data(),
                probs,
                g.data(),
                width,
                *heads,
                segments,
                &mut dq,
                &mut dk,
                &mut dv,
            );
            for (id, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(t) = acc(grads, nodes, id) {
                    add_into(t.data_mut(), &d);
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

fn reduce_broadcast<T: Scalar>(
    gb: &mut Tensor<T>,
    g: &[T],
    kind: Broadcast,
    factor: impl Fn(usize) -> T,
) {
    match kind {
        Broadcast::Same => {
            for (i, x) in gb.data_mut().iter_mut().enumerate() {
                *x += g[i] * factor(i);
            }
        }
        Broadcast::Row => {
            let c = gb.len();
            for (i, &y) in g.iter().enumerate() {
                gb.data_mut()[i % c] += y * factor(i);
            }
        }
        Broadcast::Scalar => {
            let s = g
                .iter()
                .enumerate()
                .fold(T::zero(), |a, (i, &y)| a + y * factor(i));
            gb.data_mut()[0] += s;
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn same_tape(&self, other: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Graph("operands live on different tapes".into()))
        }
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let needs = self.tape.needs(self.id);
        self.tape.push(value, op, needs)
    }

    fn binary(&self, other: &Var<'_, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(value, op, needs)
    }

    pub fn matmul(&self, other: &Var<'_, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Var<'_, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let v = self.value().matmul_t(&other.value())?;
        Ok(self.binary(other, v, Op::MatMulT(self.id, other.id)))
    }

    pub fn add(&self, other: &Var<'_, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let kind = broadcast_kind(&a, &b, "add")?;
        let v = a.add(&b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id, kind)))
    }

    pub fn mul(&self, other: &Var<'_, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let kind = broadcast_kind(&a, &b, "mul")?;
        let v = a.mul(&b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id, kind)))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let v = self.value().scale(s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Var<'t, T> {
        let v = self.value().neg();
        self.unary(v, Op::Neg(self.id))
    }

    pub fn log(&self) -> Result<Var<'t, T>> {
        let v = self.value().log()?;
        Ok(self.unary(v, Op::Log(self.id)))
    }

    pub fn gelu(&self) -> Result<Var<'t, T>> {
        let v = self.value().map(kernels::gelu);
        Ok(self.unary(v, Op::Gelu(self.id)))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t, T>> {
        let v = self.value().softmax_rows()?;
        Ok(self.unary(v, Op::SoftmaxRows(self.id)))
    }

    pub fn layernorm(&self, gamma: &Var<'_, T>, beta: &Var<'_, T>) -> Result<Var<'t, T>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let x = self.value();
        let c = x.cols();
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.len() != c || bv.len() != c {
            return Err(Error::Dimension(format!(
                "layernorm affine width {}/{} != {c}",
                gv.len(),
                bv.len()
            )));
        }
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(c) {
            kernels::layernorm_row(row, gv.data(), bv.data());
        }
        let tape = self.tape;
        let needs = tape.needs(self.id) || tape.needs(gamma.id) || tape.needs(beta.id);
        Ok(tape.push(out, Op::LayerNorm(self.id, gamma.id, beta.id), needs))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::lit(self.value().len() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Mean negative log-likelihood of `targets` under row softmax.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t, T>> {
        let logits = self.value();
        let loss = logits.cross_entropy(targets)?;
        let probs = logits.softmax_rows()?.into_data();
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Rows of `self` in the given order (embedding lookup, row selection).
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().select_rows(rows)?;
        Ok(self.unary(
            v,
            Op::Gather {
                table: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `self` with `src.row(i)` added to row `rows[i]`.
    pub fn scatter_add(&self, src: &Var<'_, T>, rows: &[usize]) -> Result<Var<'t, T>> {
        self.same_tape(src)?;
        let base = self.value();
        let s = src.value();
        if s.cols() != base.cols() || s.rows() != rows.len() {
            return Err(Error::Dimension(format!(
                "scatter_add of {:?} into {:?} at {} rows",
                s.shape(),
                base.shape(),
                rows.len()
            )));
        }
        let mut out = (*base).clone();
        for (i, &r) in rows.iter().enumerate() {
            if r >= base.rows() {
                return Err(Error::Index(format!("row {r} out of {}", base.rows())));
            }
            add_into(out.row_mut(r), s.row(i));
        }
        Ok(self.binary(
            src,
            out,
            Op::ScatterAdd {
                base: self.id,
                src: src.id,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Causal multi-head attention with `self` as queries.
    pub fn attention(
        &self,
        k: &Var<'_, T>,
        v: &Var<'_, T>,
        heads: usize,
        segments: &[Segment],
    ) -> Result<Var<'t, T>> {
        self.same_tape(k)?;
        self.same_tape(v)?;
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::Dimension("attention q/k/v shapes differ".into()));
        }
        let width = qv.cols();
        if heads == 0 || width % heads != 0 {
            return Err(Error::Dimension(format!(
                "{heads} heads do not divide {width}"
            )));
        }
        let rows: usize = segments.iter().map(|s| s.len).sum();
        if rows != qv.rows() {
            return Err(Error::Dimension(format!(
                "segments cover {rows} rows, tensor has {}",
                qv.rows()
            )));
        }
        let mut out = vec![T::zero(); qv.len()];
        let mut probs = Vec::new();
        kernels::attention_forward(
            qv.data(),
            kv.data(),
            vv.data(),
            width,
            heads,
            segments,
            &mut out,
            Some(&mut probs),
        );
        let tape = self.tape;
        let needs = tape.needs(self.id) || tape.needs(k.id) || tape.needs(v.id);
        Ok(tape.push(
            Tensor::new(qv.shape().to_vec(), out)?,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            needs,
        ))
    }
}
