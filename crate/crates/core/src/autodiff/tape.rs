//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Nodes live in an arena in creation order, which is already a topological
//! order: every node's parents have smaller indices. [`Tape::backward`] walks
//! the arena from the loss down to index 0.
//!
//! Gradients accumulate across calls to `backward`: each call computes a fresh
//! set of adjoints and adds them into the stored gradients, so two calls on the
//! same tape leave exactly twice the single-call gradient.

use crate::autodiff::matrix::{Matrix, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Entrywise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise<T = f64> {
    Add,
    Sub,
    Scale(T),
    Relu,
    Log,
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Log(NodeId),
    AddRow(NodeId, NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Nll {
        probs: NodeId,
        labels: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        softmax: Matrix<T>,
    },
    MixtureNll {
        logits: Vec<NodeId>,
        labels: Vec<usize>,
        softmax: Vec<Matrix<T>>,
        responsibility: Vec<Vec<T>>,
    },
    ConcatCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows {
        input: NodeId,
        start: usize,
    },
    Sum(NodeId),
    Reshape(NodeId),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Log(_) => "log",
            Op::AddRow(..) => "add_row",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::Nll { .. } => "nll_loss",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MixtureNll { .. } => "mixture_nll",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Log(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Sum(a)
            | Op::Reshape(a) => vec![*a],
            Op::Nll { probs, .. } => vec![*probs],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::MixtureNll { logits, .. } => logits.clone(),
            Op::ConcatRows(parts) => parts.clone(),
            Op::SliceRows { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    value: Matrix<T>,
    grad: Option<Matrix<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of a forward computation.
#[derive(Debug, Clone)]
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::Shape { op, left, right }
}

fn row_softmax<T: Real>(z: &Matrix<T>) -> Matrix<T> {
    let mut out = z.clone();
    for r in 0..z.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

fn row_log_softmax<T: Real>(z: &Matrix<T>) -> Matrix<T> {
    let mut out = z.clone();
    for r in 0..z.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let total = row.iter().fold(T::zero(), |a, &b| a + (b - max).exp());
        let lse = max + total.ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    out
}

impl Tape<f64> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

impl<T: Real> Tape<T> {

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient; zeros when nothing has flowed into the node.
    pub fn grad(&self, id: NodeId) -> Matrix<T> {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Matrix<T>) -> NodeId {
        self.leaf(value, true)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`, the row-sample linear map `x · Wᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().position(|&v| !(v > T::zero())) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("entry {bad} is {} (must be > 0)", x.data()[bad]),
            });
        }
        let v = x.map(|v| v.ln());
        Ok(self.push(v, Op::Log(a)))
    }

    /// Dispatches an [`Elementwise`] kind over its operands.
    pub fn elementwise(&mut self, kind: Elementwise<T>, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Sub => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Domain {
                op: "elementwise",
                detail: format!("{kind:?} takes {arity} operand(s), got {}", inputs.len()),
            });
        }
        match kind {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Sub => self.sub(inputs[0], inputs[1]),
            Elementwise::Scale(c) => Ok(self.scale(inputs[0], c)),
            Elementwise::Relu => Ok(self.relu(inputs[0])),
            Elementwise::Log => self.log(inputs[0]),
        }
    }

    /// `x[B×d] + 1·bias[1×d]`: the one explicit broadcast in the engine.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.0 != 1 || bs.1 != xs.1 {
            return Err(shape_err("add_row", xs, bs));
        }
        let mut v = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..xs.0 {
            for (o, &bv) in v.row_mut(r).iter_mut().zip(&b) {
                *o = *o + bv;
            }
        }
        Ok(self.push(v, Op::AddRow(x, bias)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, z: NodeId) -> Result<NodeId> {
        let s = self.shape(z);
        if s.1 < 2 {
            return Err(Error::Domain {
                op: "softmax",
                detail: format!("needs at least 2 columns, got {}", s.1),
            });
        }
        let v = row_softmax(self.value(z));
        Ok(self.push(v, Op::SoftmaxRows(z)))
    }

    /// Row-wise softmax over any width ≥ 1 (attention rows may be a single token).
    pub fn softmax_rows(&mut self, z: NodeId) -> NodeId {
        let v = row_softmax(self.value(z));
        self.push(v, Op::SoftmaxRows(z))
    }

    pub fn log_softmax(&mut self, z: NodeId) -> NodeId {
        let v = row_log_softmax(self.value(z));
        self.push(v, Op::LogSoftmaxRows(z))
    }

    fn check_labels(&self, op: &'static str, rows: usize, cols: usize, labels: &[usize]) -> Result<()> {
        if labels.len() != rows {
            return Err(shape_err(op, (rows, cols), (labels.len(), 1)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(Error::Domain {
                op,
                detail: format!("label {bad} out of range for {cols} classes"),
            });
        }
        Ok(())
    }

    /// Mean over rows of `-ln probs[i, labels[i]]`.
    pub fn nll_loss(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.shape(probs);
        self.check_labels("nll_loss", rows, cols, labels)?;
        let p = self.value(probs);
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let py = p.get(i, y);
            if !(py > T::zero()) {
                return Err(Error::Domain {
                    op: "nll_loss",
                    detail: format!("probability {py} at row {i}, label {y}"),
                });
            }
            total = total - py.ln();
        }
        let v = Matrix::filled(1, 1, total / T::from_f64(rows as f64));
        Ok(self.push(
            v,
            Op::Nll {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Fused softmax + negative log-likelihood via log-sum-exp, mean over rows.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.shape(logits);
        self.check_labels("cross_entropy", rows, cols, labels)?;
        let z = self.value(logits);
        let logp = row_log_softmax(z);
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            total = total - logp.get(i, y);
        }
        let softmax = row_softmax(z);
        let v = Matrix::filled(1, 1, total / T::from_f64(rows as f64));
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax,
            },
        ))
    }

    /// Mean over rows of `-ln((1/M) Σₘ softmax(zₘ)[i, yᵢ])`, computed in log space.
    pub fn mixture_nll(&mut self, logits: &[NodeId], labels: &[usize]) -> Result<NodeId> {
        let first = *logits.first().ok_or_else(|| Error::Domain {
            op: "mixture_nll",
            detail: "no members".into(),
        })?;
        let (rows, cols) = self.shape(first);
        for &z in logits {
            if self.shape(z) != (rows, cols) {
                return Err(shape_err("mixture_nll", (rows, cols), self.shape(z)));
            }
        }
        self.check_labels("mixture_nll", rows, cols, labels)?;
        let members = logits.len();
        let ln_m = T::from_f64(members as f64).ln();
        let log_probs: Vec<Matrix<T>> = logits.iter().map(|&z| row_log_softmax(self.value(z))).collect();
        let softmax: Vec<Matrix<T>> = logits.iter().map(|&z| row_softmax(self.value(z))).collect();
        let mut responsibility = vec![vec![T::zero(); rows]; members];
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let max = log_probs.iter().fold(T::neg_infinity(), |a, lp| a.max(lp.get(i, y)));
            let sum = log_probs
                .iter()
                .fold(T::zero(), |a, lp| a + (lp.get(i, y) - max).exp());
            let log_mix = max + sum.ln();
            for (m, lp) in log_probs.iter().enumerate() {
                responsibility[m][i] = (lp.get(i, y) - log_mix).exp();
            }
            total = total - (log_mix - ln_m);
        }
        let v = Matrix::filled(1, 1, total / T::from_f64(rows as f64));
        Ok(self.push(
            v,
            Op::MixtureNll {
                logits: logits.to_vec(),
                labels: labels.to_vec(),
                softmax,
                responsibility,
            },
        ))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hconcat(self.value(b))?;
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(shape_err("concat_rows", (rows, cols), s));
            }
            rows += s.0;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(input);
        if start + len > s.0 {
            return Err(shape_err("slice_rows", s, (start, len)));
        }
        let x = self.value(input);
        let v = Matrix::from_vec(len, s.1, x.data()[start * s.1..(start + len) * s.1].to_vec())?;
        Ok(self.push(v, Op::SliceRows { input, start }))
    }

    /// Reinterprets the row-major payload under a new shape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let x = self.value(a);
        if rows * cols != x.len() {
            return Err(shape_err("reshape", x.shape(), (rows, cols)));
        }
        let v = Matrix::from_vec(rows, cols, x.data().to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient and
    /// adds the result into its stored gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Matrix<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj)?;
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.accumulate(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Matrix<T>>], to: NodeId, g: Matrix<T>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut adj[to.0] {
            Some(acc) => acc.accumulate(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, adj: &mut [Option<Matrix<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.send(adj, *a, g.matmul_nt(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.send(adj, *b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    self.send(adj, *a, g.matmul(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.send(adj, *b, g.matmul_tn(self.value(*a))?);
                }
            }
            Op::Transpose(a) => self.send(adj, *a, g.transpose()),
            Op::Add(a, b) => {
                self.send(adj, *a, g.clone());
                self.send(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(adj, *a, g.clone());
                self.send(adj, *b, g.scale(-T::one()));
            }
            Op::Scale(a, c) => self.send(adj, *a, g.scale(*c)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if !(xv > T::zero()) {
                        *dv = T::zero();
                    }
                }
                self.send(adj, *a, d);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv = *dv / xv;
                }
                self.send(adj, *a, d);
            }
            Op::AddRow(x, b) => {
                self.send(adj, *x, g.clone());
                if self.wants(*b) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                    self.send(adj, *b, db);
                }
            }
            Op::SoftmaxRows(z) => {
                let s = &node.value;
                let mut d = Matrix::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    let dot = s
                        .row(r)
                        .iter()
                        .zip(g.row(r))
                        .fold(T::zero(), |a, (&sv, &gv)| a + sv * gv);
                    for ((o, &sv), &gv) in d.row_mut(r).iter_mut().zip(s.row(r)).zip(g.row(r)) {
                        *o = sv * (gv - dot);
                    }
                }
                self.send(adj, *z, d);
            }
            Op::LogSoftmaxRows(z) => {
                let s = row_softmax(self.value(*z));
                let mut d = g.clone();
                for r in 0..s.rows() {
                    let total = g.row(r).iter().fold(T::zero(), |a, &v| a + v);
                    for (o, &sv) in d.row_mut(r).iter_mut().zip(s.row(r)) {
                        *o = *o - sv * total;
                    }
                }
                self.send(adj, *z, d);
            }
            Op::Nll { probs, labels } => {
                let p = self.value(*probs);
                let scale = g.get(0, 0) / T::from_f64(labels.len() as f64);
                let mut d = Matrix::zeros(p.rows(), p.cols());
                for (i, &y) in labels.iter().enumerate() {
                    d.set(i, y, -scale / p.get(i, y));
                }
                self.send(adj, *probs, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                softmax,
            } => {
                let scale = g.get(0, 0) / T::from_f64(labels.len() as f64);
                let mut d = softmax.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d.set(i, y, d.get(i, y) - T::one());
                }
                self.send(adj, *logits, d.scale(scale));
            }
            Op::MixtureNll {
                logits,
                labels,
                softmax,
                responsibility,
            } => {
                let scale = g.get(0, 0) / T::from_f64(labels.len() as f64);
                for (m, &z) in logits.iter().enumerate() {
                    if !self.wants(z) {
                        continue;
                    }
                    let mut d = softmax[m].clone();
                    for (i, &y) in labels.iter().enumerate() {
                        d.set(i, y, d.get(i, y) - T::one());
                        let w = responsibility[m][i] * scale;
                        for v in d.row_mut(i) {
                            *v = *v * w;
                        }
                    }
                    self.send(adj, z, d);
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.shape(*a).1;
                let q = self.shape(*b).1;
                let mut ga = Matrix::zeros(g.rows(), p);
                let mut gb = Matrix::zeros(g.rows(), q);
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..p]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[p..]);
                }
                self.send(adj, *a, ga);
                self.send(adj, *b, gb);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.wants(p) {
                        let part = Matrix::from_vec(r, c, g.data()[offset * c..(offset + r) * c].to_vec())?;
                        self.send(adj, p, part);
                    }
                    offset += r;
                }
            }
            Op::SliceRows { input, start } => {
                let (r, c) = self.shape(*input);
                let mut d = Matrix::zeros(r, c);
                let len = g.rows();
                d.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                self.send(adj, *input, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.send(adj, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.send(adj, *a, Matrix::from_vec(r, c, g.data().to_vec())?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Matrix::identity(2));
        let b = t.constant(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let y = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(y), &m(&[&[5.0, 6.0], &[7.0, 8.0]]));

        let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = t.matmul(a, b).unwrap();
        // naive triple loop: [1*5+2*7, 1*6+2*8; 3*5+4*7, 3*6+4*8]
        assert_eq!(t.value(y), &m(&[&[19.0, 22.0], &[43.0, 50.0]]));

        let z = t.constant(Matrix::zeros(2, 3));
        let y = t.matmul(a, z).unwrap();
        assert_eq!(t.value(y), &Matrix::zeros(2, 3));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        match t.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::row_vector(&[1.5, -2.0]));
        let zeros = t.constant(Matrix::zeros(1, 2));
        let y = t.elementwise(Elementwise::Add, &[x, zeros]).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let r = t.constant(Matrix::row_vector(&[-1.0, 0.0, 2.0]));
        let y = t.elementwise(Elementwise::Relu, &[r]).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);

        let s = t.constant(Matrix::row_vector(&[1.0, 3.0]));
        let y = t.elementwise(Elementwise::Scale(2.0), &[s]).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 6.0]);

        let bad = t.constant(Matrix::row_vector(&[1.0, 0.0]));
        assert!(matches!(
            t.elementwise(Elementwise::Log, &[bad]),
            Err(Error::Domain { op: "log", .. })
        ));
        let short = t.constant(Matrix::row_vector(&[1.0]));
        assert!(matches!(t.add(x, short), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_gradient_is_zero_at_zero() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::row_vector(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::row_vector(&[3.7, 3.7]));
        let p = t.softmax(z).unwrap();
        assert_eq!(t.value(p).data(), &[0.5, 0.5]);

        // exp(ln 3) = 3, so [1, 3] / 4
        let z = t.constant(Matrix::row_vector(&[0.0, 3f64.ln()]));
        let p = t.softmax(z).unwrap();
        assert!((t.value(p).get(0, 0) - 0.25).abs() < 1e-15);
        assert!((t.value(p).get(0, 1) - 0.75).abs() < 1e-15);

        let z = t.constant(Matrix::row_vector(&[1000.0, 0.0]));
        let p = t.softmax(z).unwrap();
        assert!(t.value(p).is_finite());
        assert!((t.value(p).get(0, 0) - 1.0).abs() < 1e-15);
        assert!(t.value(p).get(0, 1) < 1e-300);

        let one = t.constant(Matrix::row_vector(&[1.0]));
        assert!(t.softmax(one).is_err());
    }

    #[test]
    fn nll_examples() {
        let mut t = Tape::new();
        let c = 5;
        let u = t.constant(Matrix::filled(1, c, 1.0 / c as f64));
        let l = t.nll_loss(u, &[3]).unwrap();
        assert!((t.value(l).get(0, 0) - (c as f64).ln()).abs() < 1e-15);

        let p = t.constant(Matrix::row_vector(&[0.25, 0.75]));
        let l = t.nll_loss(p, &[1]).unwrap();
        assert!((t.value(l).get(0, 0) - 0.287_682_072_451_780_9).abs() < 1e-15);

        let p = t.constant(Matrix::row_vector(&[0.0, 1.0]));
        let l = t.nll_loss(p, &[1]).unwrap();
        assert_eq!(t.value(l).get(0, 0), 0.0);

        assert!(matches!(t.nll_loss(p, &[2]), Err(Error::Domain { .. })));
    }

    #[test]
    fn nll_gradient_touches_only_selected_entry() {
        let mut t = Tape::new();
        let p = t.variable(Matrix::row_vector(&[0.2, 0.5, 0.3]));
        let l = t.nll_loss(p, &[1]).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(p).data(), &[0.0, -2.0, 0.0]);
    }

    #[test]
    fn concat_examples() {
        let mut t = Tape::new();
        let a = t.variable(Matrix::row_vector(&[1.0, 2.0]));
        let b = t.variable(Matrix::row_vector(&[3.0]));
        let c = t.concat_cols(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);

        let empty = t.constant(Matrix::zeros(1, 0));
        let same = t.concat_cols(a, empty).unwrap();
        assert_eq!(t.value(same), t.value(a));

        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).data(), &[1.0, 1.0]);
        assert_eq!(t.grad(b).data(), &[1.0]);

        let tall = t.constant(Matrix::zeros(2, 1));
        assert!(t.concat_cols(a, tall).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::from_rows(&[&[1.0], &[-2.0], &[0.5]]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.variable(Matrix::from_rows(&[&[1.0], &[-2.0], &[0.5]]));
        let xt = t.transpose(x);
        let q = t.matmul(xt, x).unwrap();
        t.backward(q).unwrap();
        assert_eq!(t.grad(x).data(), &[2.0, -4.0, 1.0]);

        let mut t = Tape::new();
        let frozen = t.constant(Matrix::row_vector(&[1.0, 2.0]));
        let w = t.variable(Matrix::row_vector(&[3.0, 4.0]));
        let y = t.add(frozen, w).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(frozen), Matrix::zeros(1, 2));
        assert_eq!(t.grad(w).data(), &[1.0, 1.0]);

        let mut t = Tape::new();
        let v = t.variable(Matrix::zeros(1, 2));
        assert!(matches!(t.backward(v), Err(Error::NonScalarLoss { rows: 1, cols: 2 })));
    }

    #[test]
    fn repeated_backward_doubles_gradients() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::row_vector(&[0.3, -1.1, 2.0]));
        let w = t.variable(Matrix::from_rows(&[&[0.5], &[0.25], &[-0.75]]));
        let h = t.matmul(x, w).unwrap();
        let r = t.relu(h);
        let s = t.sum(r);
        t.backward(s).unwrap();
        let once_x = t.grad(x);
        let once_h = t.grad(h);
        t.backward(s).unwrap();
        assert!(t.grad(x).bit_eq(&once_x.scale(2.0)));
        assert!(t.grad(h).bit_eq(&once_h.scale(2.0)));
    }

    #[test]
    fn mixture_nll_matches_composed_ops() {
        let mut t = Tape::new();
        let z1 = t.variable(Matrix::from_rows(&[&[0.3, -0.2, 1.0], &[2.0, 0.1, -1.0]]));
        let z2 = t.variable(Matrix::from_rows(&[&[-0.5, 0.4, 0.0], &[0.2, 0.2, 0.9]]));
        let labels = [2, 0];
        let fused = t.mixture_nll(&[z1, z2], &labels).unwrap();
        let p1 = t.softmax(z1).unwrap();
        let p2 = t.softmax(z2).unwrap();
        let sum = t.add(p1, p2).unwrap();
        let avg = t.scale(sum, 0.5);
        let composed = t.nll_loss(avg, &labels).unwrap();
        let (f, c) = (t.value(fused).get(0, 0), t.value(composed).get(0, 0));
        assert!((f - c).abs() < 1e-14, "{f} vs {c}");

        t.backward(fused).unwrap();
        let (g1, g2) = (t.grad(z1), t.grad(z2));
        t.zero_grad();
        t.backward(composed).unwrap();
        for (a, b) in g1.data().iter().zip(t.grad(z1).data()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in g2.data().iter().zip(t.grad(z2).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn cross_entropy_survives_extreme_logits() {
        let mut t = Tape::new();
        let z = t.variable(Matrix::row_vector(&[-800.0, 800.0]));
        let l = t.cross_entropy(z, &[0]).unwrap();
        assert!((t.value(l).get(0, 0) - 1600.0).abs() < 1e-9);
        let l2 = t.mixture_nll(&[z, z], &[0]).unwrap();
        assert!((t.value(l2).get(0, 0) - 1600.0).abs() < 1e-9);
    }

    #[test]
    fn slice_and_concat_rows_round_trip_gradients() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::from_fn(4, 2, |r, c| (r * 2 + c) as f64));
        let top = t.slice_rows(x, 0, 2).unwrap();
        let bottom = t.slice_rows(x, 2, 2).unwrap();
        let swapped = t.concat_rows(&[bottom, top]).unwrap();
        assert_eq!(t.value(swapped).row(0), &[4.0, 5.0]);
        let w = t.constant(Matrix::from_fn(4, 2, |r, _| r as f64));
        let prod = t.sub(swapped, w).unwrap();
        let s = t.sum(prod);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), Matrix::filled(4, 2, 1.0));
    }

    #[test]
    fn f32_mode_runs_the_same_graph() {
        let mut t = Tape::<f32>::default();
        let a = t.variable(Matrix::from_rows(&[&[1.0f32, 2.0], &[3.0, 4.0]]));
        let b = t.constant(Matrix::from_rows(&[&[5.0f32, 6.0], &[7.0, 8.0]]));
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[19.0f32, 22.0, 43.0, 50.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).data(), &[11.0f32, 15.0, 11.0, 15.0]);
    }
}
