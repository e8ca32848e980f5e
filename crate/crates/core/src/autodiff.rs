//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records primitive operations in execution order; every node's
//! parents precede it, so a single reverse sweep yields gradients of any
//! scalar node with respect to every earlier node. Gradients from multiple
//! consumers accumulate by summation.
//!
//! The primitive set covers MLP forward passes and the losses used in
//! training and attacks: matmul, (row-broadcast) add, sub, elementwise
//! product, scaling, ReLU, tanh, row softmax / log-softmax, row dot products,
//! per-row selection and full sums.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node} ({op}): {left:?} vs {right:?}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward requires a scalar node; node {node} has shape {shape:?}")]
    NonScalar { node: usize, shape: Vec<usize> },
    #[error("tape already consumed by a backward pass")]
    Consumed,
    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
}

type AdResult<T> = Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    RowDot(usize, usize),
    Pick(usize, Vec<usize>),
    Sum(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::RowDot(..) => "row_dot",
            Op::Pick(..) => "pick",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of one scalar node, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros if the output does not depend
    /// on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.grads.get(var.0) {
            Some(Some(g)) => g.clone(),
            Some(None) => Tensor::zeros(&self.shapes[var.0]),
            None => panic!("variable {} not on the differentiated tape", var.0),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded non-leaf operations.
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Clears all nodes so the tape can record a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    /// Differentiable input or parameter.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, value, true)
    }

    /// Input that never needs a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> AdResult<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                node,
                op: op.name(),
            });
        }
        let requires_grad = self.parents(&op).iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn parents(&self, op: &Op) -> Vec<usize> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::RowDot(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Sum(a) => vec![a],
            Op::Pick(a, _) => vec![a],
        }
    }

    fn check(&self, v: Var) -> AdResult<()> {
        if self.consumed {
            return Err(AutodiffError::Consumed);
        }
        if v.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(v.0));
        }
        Ok(())
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            left: self.nodes[a.0].value.shape().to_vec(),
            right: self.nodes[b.0].value.shape().to_vec(),
        }
    }

    fn unary_mismatch(&self, op: &'static str, a: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            left: self.nodes[a.0].value.shape().to_vec(),
            right: vec![],
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (Some((m, k)), Some((k2, n))) = (as_matrix(av.shape()), as_matrix(bv.shape())) else {
            return Err(self.mismatch("matmul", a, b));
        };
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        self.push(Op::MatMul(a.0, b.0), Tensor::from_raw(vec![m, n], out))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> AdResult<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(self.mismatch(op.name(), a, b));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        self.push(op, Tensor::from_raw(shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.zip_same(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.zip_same(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.zip_same(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    /// Adds the vector `b` (length `n`) to every row of the matrix `a` (`[m, n]`).
    pub fn add_row(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let Some((m, n)) = as_matrix(av.shape()) else {
            return Err(self.mismatch("add_row", a, b));
        };
        if bv.shape() != [n] {
            return Err(self.mismatch("add_row", a, b));
        }
        let mut out = av.data().to_vec();
        for r in 0..m {
            for (o, &bb) in out[r * n..(r + 1) * n].iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(Op::AddRow(a.0, b.0), Tensor::from_raw(vec![m, n], out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> AdResult<Var> {
        self.map(a, Op::Scale(a.0, c), |x| c * x)
    }

    pub fn relu(&mut self, a: Var) -> AdResult<Var> {
        self.map(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> AdResult<Var> {
        self.map(a, Op::Tanh(a.0), f64::tanh)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> AdResult<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let shape = av.shape().to_vec();
        self.push(op, Tensor::from_raw(shape, data))
    }

    fn rowwise(
        &mut self,
        a: Var,
        op: Op,
        f: fn(&[f64], &mut [f64]),
    ) -> AdResult<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        if av.shape().len() > 2 || av.shape().is_empty() {
            return Err(self.unary_mismatch(op.name(), a));
        }
        let c = av.cols();
        let mut out = vec![0.0; av.len()];
        for (zi, oi) in av.data().chunks(c).zip(out.chunks_mut(c)) {
            f(zi, oi);
        }
        let shape = av.shape().to_vec();
        self.push(op, Tensor::from_raw(shape, out))
    }

    /// Numerically stabilized softmax of each row (or of a vector).
    pub fn softmax_rows(&mut self, a: Var) -> AdResult<Var> {
        self.rowwise(a, Op::SoftmaxRows(a.0), softmax_row)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> AdResult<Var> {
        self.rowwise(a, Op::LogSoftmaxRows(a.0), log_softmax_row)
    }

    /// Row-wise dot product of two `[m, n]` matrices, giving `[m]`. For two
    /// vectors this is the ordinary dot product (shape `[1]`).
    pub fn row_dot(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() || av.shape().is_empty() || av.shape().len() > 2 {
            return Err(self.mismatch("row_dot", a, b));
        }
        let c = av.cols();
        let out: Vec<f64> = av
            .data()
            .chunks(c)
            .zip(bv.data().chunks(c))
            .map(|(x, y)| crate::tensor::dot(x, y))
            .collect();
        let m = out.len();
        self.push(Op::RowDot(a.0, b.0), Tensor::from_raw(vec![m], out))
    }

    /// Selects entry `idx[r]` from row `r`, giving `[m]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> AdResult<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        let c = av.cols();
        if av.rows() != idx.len() || idx.iter().any(|&i| i >= c) {
            return Err(AutodiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "pick",
                left: av.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let out = idx.iter().enumerate().map(|(r, &i)| av.data()[r * c + i]).collect();
        self.push(Op::Pick(a.0, idx.to_vec()), Tensor::from_raw(vec![idx.len()], out))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> AdResult<Var> {
        self.check(a)?;
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Sum(a.0), Tensor::from_raw(vec![], vec![s]))
    }

    /// `a . a` summed over all entries.
    pub fn sum_squares(&mut self, a: Var) -> AdResult<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq)
    }

    /// Reverse sweep from the scalar node `out`. The tape is consumed; call
    /// [`Tape::reset`] before recording again.
    pub fn backward(&mut self, out: Var) -> AdResult<Gradients> {
        self.check(out)?;
        let ov = &self.nodes[out.0].value;
        if !ov.is_scalar() {
            return Err(AutodiffError::NonScalar {
                node: out.0,
                shape: ov.shape().to_vec(),
            });
        }
        self.consumed = true;

        let n = out.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::from_raw(node.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |p: usize| nodes[p].requires_grad;
        let mut accum = |p: usize, contrib: Vec<f64>| match &mut grads[p] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                let (m, k) = as_matrix(av.shape()).unwrap();
                let n = bv.cols();
                if needs(a) {
                    // dA = dC B^T
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for (kk, d) in da[r * k..(r + 1) * k].iter_mut().enumerate() {
                            *d = crate::tensor::dot(gr, &bv.data()[kk * n..(kk + 1) * n]);
                        }
                    }
                    accum(a, da);
                }
                if needs(b) {
                    // dB = A^T dC
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let aval = av.data()[r * k + kk];
                            if aval == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[kk * n..(kk + 1) * n].iter_mut().zip(gr) {
                                *d += aval * gv;
                            }
                        }
                    }
                    accum(b, db);
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    accum(a, g.to_vec());
                }
                if needs(b) {
                    accum(b, g.to_vec());
                }
            }
            &Op::AddRow(a, b) => {
                if needs(a) {
                    accum(a, g.to_vec());
                }
                if needs(b) {
                    let n = nodes[b].value.len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accum(b, db);
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    accum(a, g.to_vec());
                }
                if needs(b) {
                    accum(b, g.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
                if needs(a) {
                    accum(a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if needs(b) {
                    accum(b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Scale(a, c) => accum(a, g.iter().map(|v| c * v).collect()),
            &Op::Relu(a) => {
                let av = nodes[a].value.data();
                accum(
                    a,
                    g.iter()
                        .zip(av)
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            &Op::Tanh(a) => {
                let y = nodes[i].value.data();
                accum(a, g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect());
            }
            &Op::SoftmaxRows(a) => {
                let y = &nodes[i].value;
                let c = y.cols();
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(da.chunks_mut(c)) {
                    let s = crate::tensor::dot(yr, gr);
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - s);
                    }
                }
                accum(a, da);
            }
            &Op::LogSoftmaxRows(a) => {
                let y = &nodes[i].value;
                let c = y.cols();
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(da.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = gv - yv.exp() * s;
                    }
                }
                accum(a, da);
            }
            &Op::RowDot(a, b) => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                let c = av.cols();
                let scaled = |other: &Tensor| -> Vec<f64> {
                    other
                        .data()
                        .chunks(c)
                        .zip(g)
                        .flat_map(|(row, &gv)| row.iter().map(move |v| v * gv))
                        .collect()
                };
                if needs(a) {
                    accum(a, scaled(bv));
                }
                if needs(b) {
                    accum(b, scaled(av));
                }
            }
            Op::Pick(a, idx) => {
                let av = &nodes[*a].value;
                let c = av.cols();
                let mut da = vec![0.0; av.len()];
                for (r, (&j, gv)) in idx.iter().zip(g).enumerate() {
                    da[r * c + j] = *gv;
                }
                accum(*a, da);
            }
            &Op::Sum(a) => accum(a, vec![g[0]; nodes[a].value.len()]),
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for kk in 0..k {
            let aval = a[r * k + kk];
            if aval == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += aval * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn scale_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let y = tape.scale(x, 3.0).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
        assert_eq!(tape.op_count(), 1);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[3.0]);
    }

    #[test]
    fn dot_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        let y = tape.row_dot(x, x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn untouched_inputs_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        let unused = tape.var(t(&[3], &[1.0, 1.0, 1.0]));
        let y = tape.sum(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn errors() {
        let mut tape = Tape::new();
        let a = tape.var(t(&[2, 3], &[0.0; 6]));
        let b = tape.var(t(&[2, 3], &[0.0; 6]));
        match tape.matmul(a, b) {
            Err(AutodiffError::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            tape.backward(a),
            Err(AutodiffError::NonScalar { node: 0, .. })
        ));
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), AutodiffError::Consumed);
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn multiple_consumers_accumulate() {
        // y = sum(x * x + x) -> dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.var(t(&[3], &[0.5, -1.0, 2.0]));
        let xx = tape.mul(x, x).unwrap();
        let z = tape.add(xx, x).unwrap();
        let y = tape.sum(z).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, -1.0, 5.0]);
    }

    /// Scalar function exercising every primitive, for finite-difference checks.
    fn composite(tape: &mut Tape, x: Var, w: Var, b: Var, c: Var) -> Var {
        let h = tape.matmul(x, w).unwrap();
        let h = tape.add_row(h, b).unwrap();
        let r = tape.relu(h).unwrap();
        let th = tape.tanh(h).unwrap();
        let mix = tape.add(r, th).unwrap();
        let mix = tape.scale(mix, 0.7).unwrap();
        let sm = tape.softmax_rows(mix).unwrap();
        let ls = tape.log_softmax_rows(mix).unwrap();
        let diff = tape.sub(sm, c).unwrap();
        let rd = tape.row_dot(diff, ls).unwrap();
        let pk = tape.pick(ls, &[0, 2]).unwrap();
        let both = tape.mul(rd, pk).unwrap();
        let sq = tape.sum_squares(diff).unwrap();
        let s1 = tape.sum(both).unwrap();
        tape.add(s1, sq).unwrap()
    }

    fn eval(x: &Tensor, w: &Tensor, b: &Tensor, c: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let vars = (
            tape.var(x.clone()),
            tape.var(w.clone()),
            tape.var(b.clone()),
            tape.var(c.clone()),
        );
        let y = composite(&mut tape, vars.0, vars.1, vars.2, vars.3);
        tape.value(y).data()[0]
    }

    fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn every_primitive_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let inputs = [
                random_tensor(&mut rng, &[2, 4]),
                random_tensor(&mut rng, &[4, 3]),
                random_tensor(&mut rng, &[3]),
                random_tensor(&mut rng, &[2, 3]),
            ];
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|v| tape.var(v.clone())).collect();
            let y = composite(&mut tape, vars[0], vars[1], vars[2], vars[3]);
            let grads = tape.backward(y).unwrap();

            let step = 1e-5;
            for (which, var) in vars.iter().enumerate() {
                let analytic = grads.wrt(*var);
                for j in 0..inputs[which].len() {
                    let mut plus = inputs.clone();
                    let mut minus = inputs.clone();
                    plus[which].data_mut()[j] += step;
                    minus[which].data_mut()[j] -= step;
                    let fd = (eval(&plus[0], &plus[1], &plus[2], &plus[3])
                        - eval(&minus[0], &minus[1], &minus[2], &minus[3]))
                        / (2.0 * step);
                    let a = analytic.data()[j];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                    assert!(rel <= 1e-5, "input {which}[{j}]: analytic {a} vs fd {fd}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn backward_is_linear(
            xs in proptest::collection::vec(-1.0f64..1.0, 6),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            // u = sum(tanh(x)), v = sum(x * x)
            let x0 = t(&[6], &xs);
            let grad_of = |coef_u: f64, coef_v: f64| {
                let mut tape = Tape::new();
                let x = tape.var(x0.clone());
                let th = tape.tanh(x).unwrap();
                let u = tape.sum(th).unwrap();
                let v = tape.sum_squares(x).unwrap();
                let su = tape.scale(u, coef_u).unwrap();
                let sv = tape.scale(v, coef_v).unwrap();
                let y = tape.add(su, sv).unwrap();
                tape.backward(y).unwrap().wrt(x)
            };
            let combined = grad_of(a, b);
            let gu = grad_of(1.0, 0.0);
            let gv = grad_of(0.0, 1.0);
            for j in 0..6 {
                let expect = a * gu.data()[j] + b * gv.data()[j];
                prop_assert!((combined.data()[j] - expect).abs() <= 1e-12);
            }
        }
    }
}
