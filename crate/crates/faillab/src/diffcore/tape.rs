//! Wengert tape: reverse-mode differentiation by operation recording.
//!
//! A forward pass pushes primitive operations onto the tape in topological
//! order (every node's inputs precede it by construction). [`Tape::backward`]
//! seeds the scalar loss node with adjoint 1 and sweeps the tape in reverse,
//! accumulating exact partial derivatives into every reachable node.
//!
//! A tape is rebuilt per training step and owned by a single thread.
//!
//! Primitive set: affine (over concatenated input segments), tanh, relu,
//! sigmoid, log-sigmoid, log, exp, square, sum, mean, elementwise
//! add/mul/sub, scalar scale, and L2 norm. Clipping and `min` are expressed
//! through relu identities (`min(a,b) = b - relu(b-a)`), so every loss in
//! the crate stays inside this set.

use super::kernels;
use super::tensor::{Shape, Tensor};
use crate::{Error, Result};

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

/// A recorded primitive operation.
#[derive(Clone, Debug)]
pub enum Op {
    /// Leaf holding a trainable parameter; gradients are collected here.
    Param,
    /// Leaf holding data; an adjoint is computed but normally discarded.
    Const,
    /// `y = W · concat(inputs) + b`, with `W` a matrix node and `b` an
    /// optional vector node. The inputs are logical segments of one column
    /// vector, so embedding lookups ride through a one-hot segment.
    Affine {
        w: NodeId,
        b: Option<NodeId>,
        inputs: Vec<NodeId>,
    },
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Norm2(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Reverse-mode differentiation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node id.
pub struct Grads {
    adjoints: Vec<Option<Tensor>>,
}

impl Grads {
    /// Adjoint of `id`, or zeros if the node does not influence the loss.
    pub fn get(&self, id: NodeId, like: &Tensor) -> Tensor {
        match &self.adjoints[id] {
            Some(t) => t.clone(),
            None => Tensor::zeros_like(like),
        }
    }

    pub fn try_get(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id).and_then(|a| a.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Record a trainable-parameter leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Param, t)
    }

    /// Record a data leaf (no gradient wanted).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const, t)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn constant_vector(&mut self, v: Vec<f64>) -> NodeId {
        self.constant(Tensor::vector(v))
    }

    /// `W · concat(inputs) + b`.
    pub fn affine(&mut self, w: NodeId, b: Option<NodeId>, inputs: &[NodeId]) -> Result<NodeId> {
        let (rows, cols) = match self.nodes[w].value.shape {
            Shape::Matrix { rows, cols } => (rows, cols),
            other => {
                return Err(Error::Shape {
                    context: "affine weight",
                    expected: "matrix".into(),
                    got: other.to_string(),
                })
            }
        };
        let in_len: usize = inputs.iter().map(|&i| self.nodes[i].value.data.len()).sum();
        if in_len != cols {
            return Err(Error::Shape {
                context: "affine input",
                expected: format!("{cols} entries"),
                got: format!("{in_len}"),
            });
        }
        if let Some(b) = b {
            if self.nodes[b].value.data.len() != rows {
                return Err(Error::Shape {
                    context: "affine bias",
                    expected: format!("vec[{rows}]"),
                    got: self.nodes[b].value.shape.to_string(),
                });
            }
        }
        let segments: Vec<&[f64]> = inputs
            .iter()
            .map(|&i| self.nodes[i].value.data.as_slice())
            .collect();
        let out = kernels::affine(
            &self.nodes[w].value,
            b.map(|b| &self.nodes[b].value),
            &segments,
        );
        Ok(self.push(
            Op::Affine {
                w,
                b,
                inputs: inputs.to_vec(),
            },
            Tensor::vector(out),
        ))
    }

    fn unary(&mut self, x: NodeId, op: fn(NodeId) -> Op, f: fn(&[f64]) -> Vec<f64>) -> NodeId {
        let value = Tensor {
            shape: self.nodes[x].value.shape,
            data: f(&self.nodes[x].value.data),
        };
        self.push(op(x), value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh, kernels::map_tanh)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu, kernels::map_relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid, kernels::map_sigmoid)
    }

    /// log σ(x), computed as -softplus(-x).
    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::LogSigmoid, kernels::map_log_sigmoid)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Log, kernels::map_log)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Exp, kernels::map_exp)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Square, kernels::map_square)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = kernels::sum(&self.nodes[x].value.data);
        self.push(Op::Sum(x), Tensor::scalar(v))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = kernels::mean(&self.nodes[x].value.data);
        self.push(Op::Mean(x), Tensor::scalar(v))
    }

    /// Euclidean norm, reduced to a scalar.
    pub fn norm2(&mut self, x: NodeId) -> NodeId {
        let v = kernels::norm2(&self.nodes[x].value.data);
        self.push(Op::Norm2(x), Tensor::scalar(v))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: fn(NodeId, NodeId) -> Op,
        f: fn(f64, f64) -> f64,
        name: &'static str,
    ) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].value.shape, self.nodes[b].value.shape);
        if sa != sb {
            return Err(Error::Shape {
                context: name,
                expected: sa.to_string(),
                got: sb.to_string(),
            });
        }
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(op(a, b), Tensor { shape: sa, data }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul, |x, y| x * y, "mul")
    }

    /// Multiply every entry by the constant `c`.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = Tensor {
            shape: self.nodes[x].value.shape,
            data: self.nodes[x].value.data.iter().map(|v| v * c).collect(),
        };
        self.push(Op::Scale(x, c), value)
    }

    /// min(a, b) = b - relu(b - a), elementwise.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(b, a)?;
        let r = self.relu(d);
        self.sub(b, r)
    }

    /// clamp(x, lo, hi) = lo + relu(x - lo) - relu(x - hi).
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let shape_len = self.nodes[x].value.data.len();
        let lo_node = self.constant(Tensor {
            shape: self.nodes[x].value.shape,
            data: vec![lo; shape_len],
        });
        let hi_node = self.constant(Tensor {
            shape: self.nodes[x].value.shape,
            data: vec![hi; shape_len],
        });
        let above_lo = self.sub(x, lo_node)?;
        let above_lo = self.relu(above_lo);
        let above_hi = self.sub(x, hi_node)?;
        let above_hi = self.relu(above_hi);
        let partial = self.add(lo_node, above_lo)?;
        self.sub(partial, above_hi)
    }

    /// Mean of a list of scalar nodes, folded with add + scale so only
    /// listed primitives appear on the tape.
    pub fn mean_of(&mut self, scalars: &[NodeId]) -> Result<NodeId> {
        if scalars.is_empty() {
            return Err(Error::Contract("mean_of requires at least one term".into()));
        }
        let mut acc = scalars[0];
        for &s in &scalars[1..] {
            acc = self.add(acc, s)?;
        }
        Ok(self.scale(acc, 1.0 / scalars.len() as f64))
    }

    /// Reverse sweep from a scalar loss node. Returns adjoints for every
    /// node that influences the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        if self.nodes[loss].value.shape != Shape::Scalar {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss node, got {}",
                self.nodes[loss].value.shape
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(dy) = adj[id].take() else { continue };
            self.accumulate(id, &dy, &mut adj);
            adj[id] = Some(dy);
        }
        Ok(Grads { adjoints: adj })
    }

    fn bump(adj: &mut [Option<Tensor>], id: NodeId, like: &Tensor, f: impl Fn(&mut [f64])) {
        let slot = adj[id].get_or_insert_with(|| Tensor::zeros_like(like));
        f(&mut slot.data);
    }

    fn accumulate(&self, id: NodeId, dy: &Tensor, adj: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Param | Op::Const => {}
            Op::Affine { w, b, inputs } => {
                let (rows, cols) = match self.nodes[*w].value.shape {
                    Shape::Matrix { rows, cols } => (rows, cols),
                    _ => unreachable!(),
                };
                // xcat snapshot for dW.
                let mut xcat = Vec::with_capacity(cols);
                for &i in inputs {
                    xcat.extend_from_slice(&self.nodes[i].value.data);
                }
                Self::bump(adj, *w, &self.nodes[*w].value, |dw| {
                    for i in 0..rows {
                        let g = dy.data[i];
                        for j in 0..cols {
                            dw[i * cols + j] += g * xcat[j];
                        }
                    }
                });
                if let Some(b) = b {
                    Self::bump(adj, *b, &self.nodes[*b].value, |db| {
                        for i in 0..rows {
                            db[i] += dy.data[i];
                        }
                    });
                }
                // dx = Wᵀ·dy, split back into segments.
                let wdata = &self.nodes[*w].value.data;
                let mut dx = vec![0.0; cols];
                for i in 0..rows {
                    let g = dy.data[i];
                    for j in 0..cols {
                        dx[j] += wdata[i * cols + j] * g;
                    }
                }
                let mut off = 0;
                for &i in inputs {
                    let n = self.nodes[i].value.data.len();
                    let seg = &dx[off..off + n];
                    Self::bump(adj, i, &self.nodes[i].value, |d| {
                        for (dk, &sk) in d.iter_mut().zip(seg) {
                            *dk += sk;
                        }
                    });
                    off += n;
                }
            }
            Op::Tanh(x) => {
                let y = &self.nodes[id].value.data;
                Self::bump(adj, *x, &self.nodes[*x].value, |dx| {
                    for k in 0..dx.len() {
                        dx[k] += dy.data[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::Relu(x) => {
                let xin = &self.nodes[*x].value.data;
                Self::bump(adj, *x, &self.nodes[*x].value, |dx| {
                    for k in 0..dx.len() {
                        if xin[k] > 0.0 {
                            dx[k] += dy.data[k];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[id].value.data;
                Self::bump(adj, *x, &self.nodes[*x].value, |dx| {
                    for k in 0..dx.len() {
                        dx[k] += dy.data[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::LogSigmoid(x) => {
                // d/dx log σ(x) = σ(-x)
                let xin = &self.nodes[*x].value.data;
                Self::bump(adj, *x, &self.nodes[*x].value, |dx| {
                    for k in 0..dx.len() {
                        dx[k] += dy.data[k] * kernels::sigmoid(-xin[k]);
                    }
                });
            }
            Op::Log(x) => {
                let xin = &self.nodes[*x].value.data;
                Self::bump(adj, *x, &self.nodes[*x].value, |dx| {
                    for k in 0..dx.len() {
                        dx[k] += dy.data[k] / xin[k];
                    }
                });
            }
            Op::Exp(x) => {
                let y = &self.nodes[id].value.data;
                Self::bump(adj, *x, &self.nodes[*x].value, |dx| {
                    for k in 0..dx.len() {
                        dx[k] += dy.data[k] * y[k];
                    }
                });
            }
            Op::Square(x) => {
                let xin = &self.nodes[*x].value.data;
                Self::bump(adj, *x, &self.nodes[*x].value, |dx| {
                    for k in 0..dx.len() {
                        dx[k] += dy.data[k] * 2.0 * xin[k];
                    }
                });
            }
            Op::Sum(x) => {
                let g = dy.data[0];
                Self::bump(adj, *x, &self.nodes[*x].value, |dx| {
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.data.len() as f64;
                let g = dy.data[0] / n;
                Self::bump(adj, *x, &self.nodes[*x].value, |dx| {
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                });
            }
            Op::Norm2(x) => {
                // d‖x‖/dx = x/‖x‖; subgradient 0 at the origin.
                let norm = self.nodes[id].value.item();
                let g = dy.data[0];
                let xin = &self.nodes[*x].value.data;
                Self::bump(adj, *x, &self.nodes[*x].value, |dx| {
                    if norm > 0.0 {
                        for k in 0..dx.len() {
                            dx[k] += g * xin[k] / norm;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                Self::bump(adj, *a, &self.nodes[*a].value, |da| {
                    for (d, &g) in da.iter_mut().zip(&dy.data) {
                        *d += g;
                    }
                });
                Self::bump(adj, *b, &self.nodes[*b].value, |db| {
                    for (d, &g) in db.iter_mut().zip(&dy.data) {
                        *d += g;
                    }
                });
            }
            Op::Sub(a, b) => {
                Self::bump(adj, *a, &self.nodes[*a].value, |da| {
                    for (d, &g) in da.iter_mut().zip(&dy.data) {
                        *d += g;
                    }
                });
                Self::bump(adj, *b, &self.nodes[*b].value, |db| {
                    for (d, &g) in db.iter_mut().zip(&dy.data) {
                        *d -= g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.nodes[*a].value.data.clone();
                let bv = self.nodes[*b].value.data.clone();
                Self::bump(adj, *a, &self.nodes[*a].value, |da| {
                    for k in 0..da.len() {
                        da[k] += dy.data[k] * bv[k];
                    }
                });
                Self::bump(adj, *b, &self.nodes[*b].value, |db| {
                    for k in 0..db.len() {
                        db[k] += dy.data[k] * av[k];
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                Self::bump(adj, *x, &self.nodes[*x].value, |dx| {
                    for (d, &g) in dx.iter_mut().zip(&dy.data) {
                        *d += c * g;
                    }
                });
            }
        }
    }
}
