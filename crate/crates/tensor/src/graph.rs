//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already a topological order and backward is a single reverse sweep. Each
//! graph carries a process-unique id; a [`Var`] from one graph is rejected by
//! every other graph.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels::{flush, gemm, sigmoid, sum_f64};
use crate::tensor::Tensor;

/// Lower clamp applied to every input of [`Graph::log`].
pub const LOG_CLAMP_MIN: f32 = 1e-7;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }

    pub fn graph_id(self) -> u64 {
        self.graph
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f32),
    AddBias(usize, usize),
    Neg(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, f32),
    Log(usize),
    Clamp(usize),
    Sum(usize),
    Mean(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Confined to one thread of execution at a time; it is
/// `Send` but offers no shared mutation.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, keyed by the leaves of the graph that
/// produced them.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a `requires_grad` leaf. Leaves the
    /// loss does not depend on get all zeros.
    pub fn wrt(&self, var: Var) -> Result<&[f32]> {
        if var.graph != self.graph {
            return Err(TensorError::ForeignVar {
                expected: self.graph,
                found: var.graph,
            });
        }
        self.grads
            .get(var.index)
            .and_then(|g| g.as_deref())
            .ok_or_else(|| TensorError::Domain {
                op: "gradient",
                detail: format!("node {} is not a trainable leaf", var.index),
            })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node. Panics if `var` belongs to another graph.
    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.graph, self.id, "Var used with a foreign graph");
        &self.nodes[var.index].value
    }

    /// Copies `tensor` into the graph; it is differentiable iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.data().to_vec());
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Moves `tensor` into the graph as a non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let value = tensor.with_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.graph != self.id {
            return Err(TensorError::ForeignVar {
                expected: self.id,
                found: var.graph,
            });
        }
        Ok(var.index)
    }

    fn node(&self, index: usize) -> &Node {
        &self.nodes[index]
    }

    fn grad_flag(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.node(ia).value.shape(), self.node(ib).value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.node(ia).value.data(),
            false,
            self.node(ib).value.data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Equal shapes, or one operand holding a single value that is broadcast.
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.node(ia).value, &self.node(ib).value);
        let (shape, data) = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            (va.shape().to_vec(), data)
        } else if vb.len() == 1 {
            let y = vb.data()[0];
            (va.shape().to_vec(), va.data().iter().map(|&x| f(x, y)).collect())
        } else if va.len() == 1 {
            let x = va.data()[0];
            (vb.shape().to_vec(), vb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        };
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(Tensor::from_parts(shape, data), op(ia, ib), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.map_value(ia, |x| x + c);
        let rg = self.grad_flag(&[ia]);
        Ok(self.push(value, Op::AddScalar(ia), rg))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.map_value(ia, |x| x * c);
        let rg = self.grad_flag(&[ia]);
        Ok(self.push(value, Op::MulScalar(ia, c), rg))
    }

    /// `x + bias` with `bias` (length = columns) repeated over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (vx, vb) = (&self.node(ix).value, &self.node(ib).value);
        if vx.rank() != 2 || vb.len() != vx.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let cols = vb.len();
        let data = vx
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(vb.data()).map(|(&x, &b)| x + b))
            .collect();
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.grad_flag(&[ix, ib]);
        Ok(self.push(value, Op::AddBias(ix, ib), rg))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f32::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.map_value(ia, |x| if x > 0.0 { x } else { slope * x });
        let rg = self.grad_flag(&[ia]);
        Ok(self.push(value, Op::LeakyRelu(ia, slope), rg))
    }

    /// Natural log of `max(x, LOG_CLAMP_MIN)`. The derivative is taken at the
    /// clamped point, so it stays finite and nonzero for saturated inputs.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        if let Some(index) = self.node(ia).value.data().iter().position(|v| v.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("NaN input at index {index}"),
            });
        }
        let value = self.map_value(ia, |x| x.max(LOG_CLAMP_MIN).ln());
        let rg = self.grad_flag(&[ia]);
        Ok(self.push(value, Op::Log(ia), rg))
    }

    /// Clamps values into `[lo, hi]`; the gradient passes through unchanged.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.map_value(ia, |x| x.clamp(lo, hi));
        let rg = self.grad_flag(&[ia]);
        Ok(self.push(value, Op::Clamp(ia), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.map_value(ia, f);
        let rg = self.grad_flag(&[ia]);
        Ok(self.push(value, op(ia), rg))
    }

    fn map_value(&self, index: usize, f: impl Fn(f32) -> f32) -> Tensor {
        let v = &self.node(index).value;
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
    }

    /// Sum of all entries (accumulated in f64), as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let total = sum_f64(self.node(ia).value.data()) as f32;
        let rg = self.grad_flag(&[ia]);
        Ok(self.push(Tensor::from_parts(Vec::new(), vec![total]), Op::Sum(ia), rg))
    }

    /// Mean of all entries (accumulated in f64), as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.node(ia).value;
        let mean = (sum_f64(v.data()) / v.len() as f64) as f32;
        let rg = self.grad_flag(&[ia]);
        Ok(self.push(Tensor::from_parts(Vec::new(), vec![mean]), Op::Mean(ia), rg))
    }

    /// Batch-mean cross-entropy of row-wise softmax(`logits`) against integer
    /// labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let v = &self.node(il).value;
        if v.rank() != 2 {
            return Err(TensorError::Rank {
                op: "softmax_cross_entropy",
                expected: 2,
                shape: v.shape().to_vec(),
            });
        }
        let (rows, classes) = (v.shape()[0], v.shape()[1]);
        if labels.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: v.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let mut probs = Vec::with_capacity(rows * classes);
        let mut total = 0.0f64;
        for (row, &label) in v.data().chunks_exact(classes).zip(labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(f64::from(x)));
            let z: f64 = row.iter().map(|&x| (f64::from(x) - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - f64::from(row[label]);
            probs.extend(row.iter().map(|&x| (f64::from(x) - log_z).exp() as f32));
        }
        let loss = (total / rows as f64) as f32;
        let rg = self.grad_flag(&[il]);
        let op = Op::SoftmaxCrossEntropy {
            logits: il,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::from_parts(Vec::new(), vec![loss]), op, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        let root_value = &self.node(root).value;
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for index in (0..=root).rev() {
            let node = &self.nodes[index];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            if let Some(upstream) = grads[index].take() {
                self.propagate(node, &upstream, &mut grads);
            }
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, grad)| match node.op {
                Op::Leaf if node.requires_grad => {
                    Some(grad.unwrap_or_else(|| vec![0.0; node.value.len()]))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, up: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let value = |i: usize| self.nodes[i].value.data();
        let mut send = |i: usize, delta: Vec<f32>| {
            if !self.nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let out = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, up, false, value(b), true, 0.0, &mut da);
                    send(a, da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, value(a), true, up, false, 0.0, &mut db);
                    send(b, db);
                }
            }
            Op::Add(a, b) => {
                send(a, reduce_to(self.nodes[a].value.len(), up.to_vec()));
                send(b, reduce_to(self.nodes[b].value.len(), up.to_vec()));
            }
            Op::Sub(a, b) => {
                send(a, reduce_to(self.nodes[a].value.len(), up.to_vec()));
                let neg = up.iter().map(|g| -g).collect();
                send(b, reduce_to(self.nodes[b].value.len(), neg));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (value(a), value(b));
                let da = up.iter().enumerate().map(|(i, g)| g * at(vb, i)).collect();
                let db = up.iter().enumerate().map(|(i, g)| g * at(va, i)).collect();
                send(a, reduce_to(va.len(), da));
                send(b, reduce_to(vb.len(), db));
            }
            Op::AddScalar(a) => send(a, up.to_vec()),
            Op::MulScalar(a, c) => send(a, up.iter().map(|g| g * c).collect()),
            Op::AddBias(x, b) => {
                send(x, up.to_vec());
                let cols = self.nodes[b].value.len();
                let mut acc = vec![0.0f64; cols];
                for row in up.chunks_exact(cols) {
                    acc.iter_mut().zip(row).for_each(|(a, &g)| *a += f64::from(g));
                }
                send(b, acc.into_iter().map(|v| v as f32).collect());
            }
            Op::Neg(a) => send(a, up.iter().map(|g| -g).collect()),
            Op::Sigmoid(a) => {
                send(a, up.iter().zip(out).map(|(g, y)| flush(g * y * (1.0 - y))).collect());
            }
            Op::Tanh(a) => send(a, up.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Relu(a) => {
                let x = value(a);
                send(a, up.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::LeakyRelu(a, slope) => {
                let x = value(a);
                let d = up
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                    .collect();
                send(a, d);
            }
            Op::Log(a) => {
                let x = value(a);
                send(a, up.iter().zip(x).map(|(g, &x)| g / x.max(LOG_CLAMP_MIN)).collect());
            }
            Op::Clamp(a) => send(a, up.to_vec()),
            Op::Sum(a) => send(a, vec![up[0]; self.nodes[a].value.len()]),
            Op::Mean(a) => {
                let n = self.nodes[a].value.len();
                send(a, vec![(f64::from(up[0]) / n as f64) as f32; n]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                ref labels,
                ref probs,
            } => {
                let rows = labels.len();
                let classes = probs.len() / rows;
                let scale = up[0] / rows as f32;
                let mut d: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    d[r * classes + label] -= scale;
                }
                send(logits, d);
            }
        }
    }
}

/// Element `i` of a tensor that is either full-size or a broadcast scalar.
fn at(values: &[f32], i: usize) -> f32 {
    if values.len() == 1 {
        values[0]
    } else {
        values[i]
    }
}

/// Sums a full-size gradient down to a broadcast scalar operand.
fn reduce_to(len: usize, delta: Vec<f32>) -> Vec<f32> {
    if len == delta.len() {
        delta
    } else {
        vec![sum_f64(&delta) as f32]
    }
}
