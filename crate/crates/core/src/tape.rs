//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as it is evaluated (define-by-run);
//! [`Tape::backward`] then walks the record once in reverse order and
//! accumulates gradients into the leaves. Tapes are rebuilt per training
//! step; a single tape is single-threaded, but independent tapes can run
//! in parallel.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Softplus(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// Elementwise `max(c, x)`; subgradient 0 at the kink.
    MaxScalar(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations and differentiates scalar outputs.
pub struct Tape {
    nodes: Vec<Node>,
    backward_visits: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_visits: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes processed by the last backward pass.
    pub fn backward_visits(&self) -> usize {
        self.backward_visits
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as constant data.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward output with respect to `id`.
    /// Zero for nodes the output does not depend on.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(node.value.rows(), node.value.cols()),
        }
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn finish(&mut self, op: &'static str, value: Tensor, node: Op, req: bool) -> Result<NodeId> {
        value.check_finite(op)?;
        Ok(self.push(value, node, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let req = self.requires(&[a, b]);
        self.finish("add", v, Op::Add(a, b), req)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let req = self.requires(&[a, b]);
        self.finish("sub", v, Op::Sub(a, b), req)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let req = self.requires(&[a, b]);
        self.finish("mul", v, Op::Mul(a, b), req)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let req = self.requires(&[a, b]);
        self.finish("matmul", v, Op::MatMul(a, b), req)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        let req = self.requires(&[a]);
        self.finish("exp", v, Op::Exp(a), req)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::sqrt);
        let req = self.requires(&[a]);
        self.finish("sqrt", v, Op::Sqrt(a), req)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        let req = self.requires(&[a]);
        self.finish("square", v, Op::Square(a), req)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(softplus);
        let req = self.requires(&[a]);
        self.finish("softplus", v, Op::Softplus(a), req)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).scale(c);
        let req = self.requires(&[a]);
        self.finish("scale", v, Op::Scale(a, c), req)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        let req = self.requires(&[a]);
        self.finish("add_scalar", v, Op::AddScalar(a), req)
    }

    /// Elementwise `max(c, x)`.
    pub fn max_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(c));
        let req = self.requires(&[a]);
        self.finish("max_scalar", v, Op::MaxScalar(a, c), req)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::from_parts(1, 1, vec![self.value(a).sum()]);
        let req = self.requires(&[a]);
        self.finish("sum", v, Op::Sum(a), req)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let v = Tensor::from_parts(1, 1, vec![self.value(a).sum() / n]);
        let req = self.requires(&[a]);
        self.finish("mean", v, Op::Mean(a), req)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transposed();
        let req = self.requires(&[a]);
        self.finish("transpose", v, Op::Transpose(a), req)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape(),
                rhs: (rows, cols),
            });
        }
        let v = Tensor::from_parts(rows, cols, t.data().to_vec());
        let req = self.requires(&[a]);
        self.finish("reshape", v, Op::Reshape(a), req)
    }

    /// Vertical stack; all parts must have the same column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput {
                what: "concat_rows",
            });
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: t.shape(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let req = self.requires(parts);
        self.finish(
            "concat_rows",
            Tensor::from_parts(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            req,
        )
    }

    /// Horizontal stack; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput {
                what: "concat_cols",
            });
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: (rows, cols),
                    rhs: t.shape(),
                });
            }
            cols += t.cols();
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..rows {
                let src = t.row(i);
                data[i * cols + offset..i * cols + offset + t.cols()].copy_from_slice(src);
            }
            offset += t.cols();
        }
        let req = self.requires(parts);
        self.finish(
            "concat_cols",
            Tensor::from_parts(rows, cols, data),
            Op::ConcatCols(parts.to_vec()),
            req,
        )
    }

    /// Rows `from..to` of `a`.
    pub fn slice_rows(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let t = self.value(a);
        if from > to || to > t.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: t.shape(),
                rhs: (from, to),
            });
        }
        let cols = t.cols();
        let v = Tensor::from_parts(to - from, cols, t.data()[from * cols..to * cols].to_vec());
        let req = self.requires(&[a]);
        self.finish("slice_rows", v, Op::SliceRows(a, from, to), req)
    }

    /// Columns `from..to` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let t = self.value(a);
        if from > to || to > t.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: t.shape(),
                rhs: (from, to),
            });
        }
        let mut data = Vec::with_capacity(t.rows() * (to - from));
        for i in 0..t.rows() {
            data.extend_from_slice(&t.row(i)[from..to]);
        }
        let v = Tensor::from_parts(t.rows(), to - from, data);
        let req = self.requires(&[a]);
        self.finish("slice_cols", v, Op::SliceCols(a, from, to), req)
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (x, d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *x += d;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    /// Backpropagates from a scalar output node. Each node at or before
    /// `out` is visited exactly once, in reverse recording order.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        let shape = self.value(out).shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarOutput { shape });
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[out.0].grad = Some(Tensor::ones(1, 1));
        self.backward_visits = 0;

        for i in (0..=out.0).rev() {
            self.backward_visits += 1;
            if !self.nodes[i].requires_grad {
                continue;
            }
            // move the accumulated gradient out for the duration of the
            // propagation, then put it back (no copy)
            let upstream = match std::mem::take(&mut self.nodes[i].grad) {
                Some(g) => g,
                None => continue,
            };
            self.propagate(NodeId(i), &upstream);
            self.nodes[i].grad = Some(upstream);
        }
        Ok(())
    }

    fn propagate(&mut self, id: NodeId, g: &Tensor) {
        // Only inputs with requires_grad receive contributions; constants
        // are skipped to keep the pass cheap.
        let op = std::mem::replace(&mut self.nodes[id.0].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(*a, g.clone());
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(*a, g.clone());
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(*b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let d = g.zip(self.value(*b), |x, y| x * y);
                    self.accumulate(*a, d);
                }
                if self.nodes[b.0].requires_grad {
                    let d = g.zip(self.value(*a), |x, y| x * y);
                    self.accumulate(*b, d);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).shape();
                let n = self.value(*b).cols();
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(g.data(), self.value(*b).data(), m, n, k, &mut da);
                    self.accumulate(*a, Tensor::from_parts(m, k, da));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(self.value(*a).data(), g.data(), k, m, n, &mut db);
                    self.accumulate(*b, Tensor::from_parts(k, n, db));
                }
            }
            Op::Exp(a) => {
                let d = g.zip(self.value(id), |gv, out| gv * out);
                self.accumulate(*a, d);
            }
            Op::Sqrt(a) => {
                let d = g.zip(self.value(id), |gv, out| gv / (2.0 * out));
                self.accumulate(*a, d);
            }
            Op::Square(a) => {
                let d = g.zip(self.value(*a), |gv, x| gv * 2.0 * x);
                self.accumulate(*a, d);
            }
            Op::Softplus(a) => {
                let d = g.zip(self.value(*a), |gv, x| gv * sigmoid(x));
                self.accumulate(*a, d);
            }
            Op::Scale(a, c) => {
                self.accumulate(*a, g.scale(*c));
            }
            Op::AddScalar(a) => {
                self.accumulate(*a, g.clone());
            }
            Op::MaxScalar(a, c) => {
                let d = g.zip(self.value(*a), |gv, x| if x > *c { gv } else { 0.0 });
                self.accumulate(*a, d);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                let t = self.value(*a);
                let d = Tensor::from_parts(t.rows(), t.cols(), vec![gv; t.len()]);
                self.accumulate(*a, d);
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let gv = g.data()[0] / t.len() as f64;
                let d = Tensor::from_parts(t.rows(), t.cols(), vec![gv; t.len()]);
                self.accumulate(*a, d);
            }
            Op::Transpose(a) => {
                self.accumulate(*a, g.transposed());
            }
            Op::Reshape(a) => {
                let t = self.value(*a);
                let d = Tensor::from_parts(t.rows(), t.cols(), g.data().to_vec());
                self.accumulate(*a, d);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut row = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.nodes[p.0].requires_grad {
                        let d = Tensor::from_parts(
                            r,
                            cols,
                            g.data()[row * cols..(row + r) * cols].to_vec(),
                        );
                        self.accumulate(p, d);
                    }
                    row += r;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut col = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.nodes[p.0].requires_grad {
                        let mut data = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            data.extend_from_slice(&g.row(i)[col..col + c]);
                        }
                        self.accumulate(p, Tensor::from_parts(rows, c, data));
                    }
                    col += c;
                }
            }
            Op::SliceRows(a, from, to) => {
                let t = self.value(*a);
                let (rows, cols) = t.shape();
                let mut data = vec![0.0; rows * cols];
                data[from * cols..to * cols].copy_from_slice(g.data());
                self.accumulate(*a, Tensor::from_parts(rows, cols, data));
            }
            Op::SliceCols(a, from, to) => {
                let t = self.value(*a);
                let (rows, cols) = t.shape();
                let mut data = vec![0.0; rows * cols];
                for i in 0..rows {
                    data[i * cols + from..i * cols + to].copy_from_slice(g.row(i));
                }
                self.accumulate(*a, Tensor::from_parts(rows, cols, data));
            }
        }
        self.nodes[id.0].op = op;
    }

    /// Backward pass plus gradient collection for a parameter set.
    /// Parameters the output does not depend on get zero gradients.
    pub fn gradients(&mut self, out: NodeId, params: &[NodeId]) -> Result<Vec<Tensor>> {
        self.backward(out)?;
        Ok(params.iter().map(|&p| self.grad(p)).collect())
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
