//! Reverse-mode differentiation over an append-only tape.
//!
//! Nodes are pushed in evaluation order, so the tape index order is already a
//! topological order and the backward sweep simply walks it in reverse.

use super::tensor::{matmul_raw, Tensor};
use crate::error::{CmusError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Relu(Var),
    Sqrt(Var),
    Recip(Var),
    Sum(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Row(Var, usize),
    Element(Var, usize),
    SoftmaxRows(Var),
    CrossEntropy(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A differentiation graph. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`; zeros if nothing has flowed into it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("gradient shape tracks value shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    /// Which inputs of every ReLU on the tape are positive, in tape order.
    /// Two evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|&x| x > 0.0))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    // ---- operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a));
        let (k2, n) = shape2(self.value(b));
        if k != k2 {
            return Err(CmusError::Dimension(format!(
                "matmul {m}x{k} by {k2}x{n}"
            )));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a));
        let (n, k2) = shape2(self.value(b));
        if k != k2 {
            return Err(CmusError::Dimension(format!(
                "matmul_t {m}x{k} by ({n}x{k2})^T"
            )));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += ad[i * k + p] * bd[j * k + p];
                }
                data[i * n + j] = s;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::MatMulT(a, b), &[a, b]))
    }

    /// Adds a `1 x n` bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(a));
        if self.value(bias).len() != n {
            return Err(CmusError::Dimension(format!(
                "bias of length {} for {m}x{n} input",
                self.value(bias).len()
            )));
        }
        let bd = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bd) {
                *x += b;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias]))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.len() != sb.len() || shape2(sa) != shape2(sb) {
            return Err(CmusError::Dimension(format!(
                "{what}: shapes {:?} and {:?}",
                sa.shape(),
                sb.shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("shape checked by caller");
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Scalar division `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != 1 || self.value(b).len() != 1 {
            return Err(CmusError::Dimension("div expects two scalars".into()));
        }
        Ok(self.zip_with(a, b, Op::Div(a, b), |x, y| x / y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Multiplies every element of `a` by the scalar node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(CmusError::Dimension(format!(
                "mul_scalar expects a scalar, got shape {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).item();
        let value = self.value(a).map(|x| x * sv);
        Ok(self.push(value, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / x);
        self.push(value, Op::Recip(a), &[a])
    }

    /// Sum of all elements, sequential in row-major order.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(0.0, |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Column means of an `m x n` matrix, as a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = shape2(t);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(t.row_slice(i)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push(Tensor::row(out), Op::MeanRows(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(CmusError::Dimension("concat of nothing".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = shape2(self.value(p));
            if r != m {
                return Err(CmusError::Dimension(format!(
                    "concat_cols: row counts {m} and {r}"
                )));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(CmusError::Dimension("concat of nothing".into())),
        };
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = shape2(self.value(p));
            if c != n {
                return Err(CmusError::Dimension(format!(
                    "concat_rows: column counts {n} and {c}"
                )));
            }
            data.extend_from_slice(self.value(p).data());
            m += r;
        }
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = shape2(self.value(a));
        if start >= end || end > n {
            return Err(CmusError::Dimension(format!(
                "slice {start}..{end} of {n} columns"
            )));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&t.row_slice(i)[start..end]);
        }
        let value = Tensor::matrix(m, end - start, data)?;
        Ok(self.push(value, Op::SliceCols(a, start, end), &[a]))
    }

    /// Row `i` as a `1 x n` row.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.rows() {
            return Err(CmusError::Dimension(format!(
                "row {i} of {} rows",
                t.rows()
            )));
        }
        let value = Tensor::row(t.row_slice(i).to_vec());
        Ok(self.push(value, Op::Row(a, i), &[a]))
    }

    /// Flat element `i` as a scalar.
    pub fn element(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.len() {
            return Err(CmusError::Dimension(format!(
                "element {i} of {}",
                t.len()
            )));
        }
        let value = Tensor::scalar(t.data()[i]);
        Ok(self.push(value, Op::Element(a, i), &[a]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = shape2(t);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(softmax_slice(t.row_slice(i)));
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// `-log softmax(logits)[label]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rows() != 1 {
            return Err(CmusError::Dimension(format!(
                "cross_entropy expects one row of logits, got {:?}",
                t.shape()
            )));
        }
        if label >= t.cols() {
            return Err(CmusError::Contract(format!(
                "label {label} out of range for {} classes",
                t.cols()
            )));
        }
        let x = t.data();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let value = Tensor::scalar(lse - x[label]);
        Ok(self.push(value, Op::CrossEntropy(logits, label), &[logits]))
    }

    // ---- backward ----

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    ///
    /// Repeated calls add onto the existing gradients; call
    /// [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(CmusError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = shape2(val(*a));
                let n = val(*b).cols();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    acc(*a, &|ga| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bd[p * n + j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &|gb| {
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[i * k + p];
                                let row = &mut gb[p * n..(p + 1) * n];
                                for (o, &gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                    *o += av * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = shape2(val(*a));
                let n = val(*b).rows();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &|ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for p in 0..k {
                                ga[i * k + p] += gv * bd[j * k + p];
                            }
                        }
                    }
                });
                acc(*b, &|gb| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for p in 0..k {
                                gb[j * k + p] += gv * ad[i * k + p];
                            }
                        }
                    }
                });
            }
            Op::AddBias(a, b) => {
                let n = val(*a).cols();
                acc(*a, &|ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*b, &|gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*b, &|gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::Sub(a, b) => {
                acc(*a, &|ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*b, &|gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &|ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bd) {
                        *o += x * y;
                    }
                });
                acc(*b, &|gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(ad) {
                        *o += x * y;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).item(), val(*b).item());
                acc(*a, &|ga| ga[0] += g[0] / bv);
                acc(*b, &|gb| gb[0] -= g[0] * av / (bv * bv));
            }
            Op::Scale(a, c) => {
                acc(*a, &|ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x * c));
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s).item();
                let ad = val(*a).data();
                acc(*a, &|ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x * sv));
                acc(*s, &|gs| {
                    gs[0] += g.iter().zip(ad).fold(0.0, |s, (x, y)| s + x * y);
                });
            }
            Op::Relu(a) => {
                let ad = val(*a).data();
                acc(*a, &|ga| {
                    for ((o, x), &y) in ga.iter_mut().zip(g).zip(ad) {
                        if y > 0.0 {
                            *o += x;
                        }
                    }
                });
            }
            Op::Sqrt(a) => {
                let out = node.value.data();
                acc(*a, &|ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(out) {
                        *o += x * 0.5 / y;
                    }
                });
            }
            Op::Recip(a) => {
                let out = node.value.data();
                acc(*a, &|ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(out) {
                        *o -= x * y * y;
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &|ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::MeanRows(a) => {
                let (m, n) = shape2(val(*a));
                acc(*a, &|ga| {
                    for row in ga.chunks_mut(n) {
                        for (o, x) in row.iter_mut().zip(g) {
                            *o += x / m as f64;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (m, w) = shape2(val(p));
                    acc(p, &|gp| {
                        for i in 0..m {
                            let src = &g[i * total + offset..i * total + offset + w];
                            gp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(o, x)| *o += x);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &|gp| {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(o, x)| *o += x)
                    });
                    offset += len;
                }
            }
            Op::SliceCols(a, start, end) => {
                let n = val(*a).cols();
                let w = end - start;
                acc(*a, &|ga| {
                    for (i, src) in g.chunks(w).enumerate() {
                        ga[i * n + start..i * n + end]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::Row(a, i) => {
                let n = val(*a).cols();
                acc(*a, &|ga| {
                    ga[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, x)| *o += x)
                });
            }
            Op::Element(a, i) => {
                acc(*a, &|ga| ga[*i] += g[0]);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = y.cols();
                acc(*a, &|ga| {
                    for ((gr, yr), orow) in g.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot = gr.iter().zip(yr).fold(0.0, |s, (x, y)| s + x * y);
                        for ((o, x), yv) in orow.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (x - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy(a, label) => {
                let p = softmax_slice(val(*a).data());
                acc(*a, &|ga| {
                    for (j, (o, pj)) in ga.iter_mut().zip(&p).enumerate() {
                        let target = if j == *label { 1.0 } else { 0.0 };
                        *o += g[0] * (pj - target);
                    }
                });
            }
        }
    }
}

/// Numerically stable softmax of one row; assumes finite input.
pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total = exps.iter().fold(0.0, |s, v| s + v);
    exps.into_iter().map(|e| e / total).collect()
}
