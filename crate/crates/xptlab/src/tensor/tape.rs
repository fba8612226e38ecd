//! The Wengert tape: records forward operations, replays them in reverse.
//!
//! Every differentiable computation starts by registering inputs with
//! [`Tape::leaf`] (trainable) or [`Tape::constant`] (frozen). Each op pushes a
//! node holding the op kind, input handles, and the forward value. Backward
//! walks the node list once, in reverse, accumulating vector-Jacobian
//! products. Propagation stops at inputs that do not require gradients, so a
//! graph with a frozen backbone never pays for backbone gradient work.
//!
//! Determinism: no op consults global state, and backward visits nodes in a
//! fixed order, so repeated runs produce bitwise-identical gradients.

use std::sync::Arc;

use super::{Tensor, TensorError, TensorResult};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Input,
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    ConcatRows { a: NodeId, b: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    GatherRows { a: NodeId, indices: Vec<usize> },
    Softmax { a: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Gelu { x: NodeId },
    Sum { x: NodeId },
    MeanOf { xs: Vec<NodeId> },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Arc<Vec<f64>> },
    Reshape { x: NodeId },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    requires_grad: bool,
}

/// Gradients keyed by tape node, as produced by [`Tape::backward`].
///
/// Nodes that were never reached, or that do not require gradients, have no
/// entry.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a node, if one was accumulated.
    pub fn get(&self, node: NodeId) -> Option<Tensor> {
        self.grads[node.0].as_ref().map(|g| {
            Tensor::from_vec(&self.shapes[node.0], g.clone()).expect("gradient shape is consistent")
        })
    }

    /// Gradient for the node behind a tensor.
    pub fn for_tensor(&self, t: &Tensor) -> Option<Tensor> {
        t.node().and_then(|id| self.get(id))
    }
}

/// Records a single forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        let id = NodeId(self.nodes.len());
        let value = Arc::new(value);
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            value: Arc::clone(&value),
            requires_grad,
        });
        Tensor::from_shared(shape, value).with_node(id)
    }

    fn node_of(&self, t: &Tensor, op: &'static str) -> TensorResult<NodeId> {
        let id = t.node().ok_or(TensorError::NotOnTape { op })?;
        if id.0 >= self.nodes.len() || !Arc::ptr_eq(&self.nodes[id.0].value, &t.shared()) {
            return Err(TensorError::NotOnTape { op });
        }
        Ok(id)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Register a trainable input. Gradients will be accumulated for it.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        self.register(t, true)
    }

    /// Register a frozen input. Backward never propagates into it.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.register(t, false)
    }

    fn register(&mut self, t: &Tensor, requires_grad: bool) -> Tensor {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input,
            shape: t.shape().to_vec(),
            value: t.shared(),
            requires_grad,
        });
        Tensor::from_shared(t.shape().to_vec(), t.shared()).with_node(id)
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        let (ia, ib) = (self.node_of(a, "add")?, self.node_of(b, "add")?);
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let value: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let rg = self.requires(ia) || self.requires(ib);
        Ok(self.push(Op::Add { a: ia, b: ib }, a.shape().to_vec(), value, rg))
    }

    /// Add a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_bias(&mut self, a: &Tensor, bias: &Tensor) -> TensorResult<Tensor> {
        let (ia, ib) = (self.node_of(a, "add_bias")?, self.node_of(bias, "add_bias")?);
        if a.shape().len() != 2 {
            return Err(TensorError::Rank {
                op: "add_bias",
                expected: 2,
                shape: a.shape().to_vec(),
            });
        }
        if bias.shape() != [a.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: a.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut value = a.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                value[r * cols + c] += bias.data()[c];
            }
        }
        let rg = self.requires(ia) || self.requires(ib);
        Ok(self.push(Op::AddBias { a: ia, bias: ib }, a.shape().to_vec(), value, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        let (ia, ib) = (self.node_of(a, "mul")?, self.node_of(b, "mul")?);
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let value: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let rg = self.requires(ia) || self.requires(ib);
        Ok(self.push(Op::Mul { a: ia, b: ib }, a.shape().to_vec(), value, rg))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: &Tensor, factor: f64) -> TensorResult<Tensor> {
        let ia = self.node_of(a, "scale")?;
        let value: Vec<f64> = a.data().iter().map(|x| x * factor).collect();
        let rg = self.requires(ia);
        Ok(self.push(Op::Scale { a: ia, factor }, a.shape().to_vec(), value, rg))
    }

    /// Rank-2 matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        let (ia, ib) = (self.node_of(a, "matmul")?, self.node_of(b, "matmul")?);
        if a.shape().len() != 2 {
            return Err(TensorError::Rank {
                op: "matmul",
                expected: 2,
                shape: a.shape().to_vec(),
            });
        }
        if b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let value = matmul_raw(a.data(), b.data(), m, k, n);
        let rg = self.requires(ia) || self.requires(ib);
        Ok(self.push(Op::Matmul { a: ia, b: ib }, vec![m, n], value, rg))
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, a: &Tensor) -> TensorResult<Tensor> {
        let ia = self.node_of(a, "transpose")?;
        if a.shape().len() != 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape: a.shape().to_vec(),
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let value = transpose_raw(a.data(), rows, cols);
        let rg = self.requires(ia);
        Ok(self.push(Op::Transpose { a: ia }, vec![cols, rows], value, rg))
    }

    /// Stack two rank-2 tensors with equal column counts, `a` on top.
    pub fn concat_rows(&mut self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        let (ia, ib) = (self.node_of(a, "concat_rows")?, self.node_of(b, "concat_rows")?);
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut value = a.data().to_vec();
        value.extend_from_slice(b.data());
        let shape = vec![a.shape()[0] + b.shape()[0], a.shape()[1]];
        let rg = self.requires(ia) || self.requires(ib);
        Ok(self.push(Op::ConcatRows { a: ia, b: ib }, shape, value, rg))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> TensorResult<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_cols of zero tensors".into()));
        }
        let ids: Vec<NodeId> = parts
            .iter()
            .map(|p| self.node_of(p, "concat_cols"))
            .collect::<TensorResult<_>>()?;
        let rows = parts[0].shape()[0];
        for p in parts {
            if p.shape().len() != 2 || p.shape()[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut value = vec![0.0; rows * total];
        let mut offset = 0;
        for p in parts {
            let w = p.shape()[1];
            for r in 0..rows {
                value[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = ids.iter().any(|&id| self.requires(id));
        Ok(self.push(Op::ConcatCols { parts: ids }, vec![rows, total], value, rg))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: &Tensor, start: usize, len: usize) -> TensorResult<Tensor> {
        let ia = self.node_of(a, "slice_cols")?;
        if a.shape().len() != 2 {
            return Err(TensorError::Rank {
                op: "slice_cols",
                expected: 2,
                shape: a.shape().to_vec(),
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        if start + len > cols || len == 0 {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                limit: cols,
            });
        }
        let mut value = vec![0.0; rows * len];
        for r in 0..rows {
            value[r * len..(r + 1) * len]
                .copy_from_slice(&a.data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.requires(ia);
        Ok(self.push(Op::SliceCols { a: ia, start, len }, vec![rows, len], value, rg))
    }

    /// Select rows of a rank-2 tensor; duplicate indices are allowed and
    /// their gradients accumulate.
    pub fn gather_rows(&mut self, a: &Tensor, indices: &[usize]) -> TensorResult<Tensor> {
        let ia = self.node_of(a, "gather_rows")?;
        if a.shape().len() != 2 {
            return Err(TensorError::Rank {
                op: "gather_rows",
                expected: 2,
                shape: a.shape().to_vec(),
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut value = vec![0.0; indices.len() * cols];
        for (r, &idx) in indices.iter().enumerate() {
            if idx >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: idx,
                    limit: rows,
                });
            }
            value[r * cols..(r + 1) * cols].copy_from_slice(&a.data()[idx * cols..(idx + 1) * cols]);
        }
        let shape = vec![indices.len(), cols];
        let rg = self.requires(ia);
        Ok(self.push(
            Op::GatherRows { a: ia, indices: indices.to_vec() },
            shape,
            value,
            rg,
        ))
    }

    /// Softmax along one axis of a rank-1 or rank-2 tensor.
    ///
    /// The max is subtracted before exponentiation, so rows containing large
    /// finite mask offsets stay representable and masked entries underflow to
    /// exactly zero.
    pub fn softmax(&mut self, a: &Tensor, axis: usize) -> TensorResult<Tensor> {
        let ia = self.node_of(a, "softmax")?;
        if axis >= a.shape().len() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                shape: a.shape().to_vec(),
            });
        }
        let (outer, axis_len, inner) = split_axis(a.shape(), axis);
        let mut value = a.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                softmax_slice(&mut value, o * axis_len * inner + i, axis_len, inner);
            }
        }
        let rg = self.requires(ia);
        Ok(self.push(Op::Softmax { a: ia, axis }, a.shape().to_vec(), value, rg))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> TensorResult<Tensor> {
        let ix = self.node_of(x, "layer_norm")?;
        let ig = self.node_of(gain, "layer_norm")?;
        let ib = self.node_of(bias, "layer_norm")?;
        if x.shape().len() != 2 {
            return Err(TensorError::Rank {
                op: "layer_norm",
                expected: 2,
                shape: x.shape().to_vec(),
            });
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        if gain.shape() != [cols] || bias.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                value[r * cols + c] = (row[c] - mean) * inv * gain.data()[c] + bias.data()[c];
            }
        }
        let rg = self.requires(ix) || self.requires(ig) || self.requires(ib);
        Ok(self.push(
            Op::LayerNorm { x: ix, gain: ig, bias: ib, eps },
            x.shape().to_vec(),
            value,
            rg,
        ))
    }

    /// GELU activation, tanh approximation.
    pub fn gelu(&mut self, x: &Tensor) -> TensorResult<Tensor> {
        let ix = self.node_of(x, "gelu")?;
        let value: Vec<f64> = x.data().iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.requires(ix);
        Ok(self.push(Op::Gelu { x: ix }, x.shape().to_vec(), value, rg))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: &Tensor) -> TensorResult<Tensor> {
        let ix = self.node_of(x, "sum")?;
        let total: f64 = x.data().iter().sum();
        let rg = self.requires(ix);
        Ok(self.push(Op::Sum { x: ix }, vec![1], vec![total], rg))
    }

    /// Mean of scalar tensors, used to average per-sample losses.
    pub fn mean_of(&mut self, xs: &[Tensor]) -> TensorResult<Tensor> {
        if xs.is_empty() {
            return Err(TensorError::Contract("mean_of over zero tensors".into()));
        }
        let ids: Vec<NodeId> = xs
            .iter()
            .map(|x| {
                if !x.is_scalar() {
                    return Err(TensorError::NotScalar { shape: x.shape().to_vec() });
                }
                self.node_of(x, "mean_of")
            })
            .collect::<TensorResult<_>>()?;
        let mean = xs.iter().map(Tensor::item).sum::<f64>() / xs.len() as f64;
        let rg = ids.iter().any(|&id| self.requires(id));
        Ok(self.push(Op::MeanOf { xs: ids }, vec![1], vec![mean], rg))
    }

    /// Mean cross-entropy between row logits and integer labels.
    ///
    /// Computed through a stable log-sum-exp; the softmax probabilities are
    /// saved on the node for the backward pass.
    pub fn cross_entropy_logits(&mut self, logits: &Tensor, labels: &[usize]) -> TensorResult<Tensor> {
        let il = self.node_of(logits, "cross_entropy_logits")?;
        if logits.shape().len() != 2 {
            return Err(TensorError::Rank {
                op: "cross_entropy_logits",
                expected: 2,
                shape: logits.shape().to_vec(),
            });
        }
        let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
        if labels.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_logits",
                lhs: logits.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let label = labels[r];
            if label >= cols {
                return Err(TensorError::Index {
                    op: "cross_entropy_logits",
                    index: label,
                    limit: cols,
                });
            }
            let row = &logits.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                probs[r * cols + c] = e;
                denom += e;
            }
            for c in 0..cols {
                probs[r * cols + c] /= denom;
            }
            // -log p[label] = log(denom) - (logit - max)
            loss += denom.ln() - (row[label] - max);
        }
        loss /= rows as f64;
        let rg = self.requires(il);
        Ok(self.push(
            Op::CrossEntropy { logits: il, labels: labels.to_vec(), probs: Arc::new(probs) },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    /// Reinterpret a tensor under a new shape with the same element count.
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> TensorResult<Tensor> {
        let ix = self.node_of(x, "reshape")?;
        let expected: usize = shape.iter().product();
        if expected != x.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: x.len(),
            });
        }
        let rg = self.requires(ix);
        Ok(self.push(Op::Reshape { x: ix }, shape.to_vec(), x.data().to_vec(), rg))
    }

    /// Reverse pass from a scalar loss. Seeds the loss gradient with 1.
    pub fn backward(&self, loss: &Tensor) -> TensorResult<Gradients> {
        if !loss.is_scalar() {
            return Err(TensorError::NotScalar { shape: loss.shape().to_vec() });
        }
        self.backward_seeded(loss, &Tensor::scalar(1.0))
    }

    /// Reverse pass from any node with an explicit upstream gradient.
    pub fn backward_seeded(&self, output: &Tensor, seed: &Tensor) -> TensorResult<Gradients> {
        let out = self.node_of(output, "backward")?;
        if seed.shape() != output.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: output.shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.data().to_vec());
        for id in (0..=out.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.propagate(id, &dy, &mut grads);
            // Inputs keep their accumulated gradient; interior nodes do not
            // need to, but holding them is harmless at this scale and makes
            // debugging easier.
            grads[id] = Some(dy);
        }
        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, id: usize, dy: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Input => {}
            Op::Add { a, b } => {
                self.accumulate(*a, dy, grads);
                self.accumulate(*b, dy, grads);
            }
            Op::AddBias { a, bias } => {
                self.accumulate(*a, dy, grads);
                if self.requires(*bias) {
                    let cols = self.shape_of(*bias)[0];
                    let rows = dy.len() / cols;
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += dy[r * cols + c];
                        }
                    }
                    self.accumulate_vec(*bias, db, grads);
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let da: Vec<f64> =
                        dy.iter().zip(self.value(*b)).map(|(g, v)| g * v).collect();
                    self.accumulate_vec(*a, da, grads);
                }
                if self.requires(*b) {
                    let db: Vec<f64> =
                        dy.iter().zip(self.value(*a)).map(|(g, v)| g * v).collect();
                    self.accumulate_vec(*b, db, grads);
                }
            }
            Op::Scale { a, factor } => {
                if self.requires(*a) {
                    let da: Vec<f64> = dy.iter().map(|g| g * factor).collect();
                    self.accumulate_vec(*a, da, grads);
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape_of(*a)[0], self.shape_of(*a)[1]);
                let n = self.shape_of(*b)[1];
                if self.requires(*a) {
                    // dA[i,k] = sum_j dY[i,j] * B[k,j]
                    let bv = self.value(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = dy[i * n + j];
                            if g != 0.0 {
                                for kk in 0..k {
                                    da[i * k + kk] += g * bv[kk * n + j];
                                }
                            }
                        }
                    }
                    self.accumulate_vec(*a, da, grads);
                }
                if self.requires(*b) {
                    // dB[k,j] = sum_i A[i,k] * dY[i,j]
                    let av = self.value(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let x = av[i * k + kk];
                            if x != 0.0 {
                                for j in 0..n {
                                    db[kk * n + j] += x * dy[i * n + j];
                                }
                            }
                        }
                    }
                    self.accumulate_vec(*b, db, grads);
                }
            }
            Op::Transpose { a } => {
                if self.requires(*a) {
                    let (rows, cols) = (node.shape[0], node.shape[1]);
                    self.accumulate_vec(*a, transpose_raw(dy, rows, cols), grads);
                }
            }
            Op::ConcatRows { a, b } => {
                let split = self.shape_of(*a).iter().product::<usize>();
                if self.requires(*a) {
                    self.accumulate_vec(*a, dy[..split].to_vec(), grads);
                }
                if self.requires(*b) {
                    self.accumulate_vec(*b, dy[split..].to_vec(), grads);
                }
            }
            Op::ConcatCols { parts } => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape_of(p)[1];
                    if self.requires(p) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&dy[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate_vec(p, dp, grads);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.requires(*a) {
                    let (rows, cols) = (self.shape_of(*a)[0], self.shape_of(*a)[1]);
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        da[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&dy[r * len..(r + 1) * len]);
                    }
                    self.accumulate_vec(*a, da, grads);
                }
            }
            Op::GatherRows { a, indices } => {
                if self.requires(*a) {
                    let (rows, cols) = (self.shape_of(*a)[0], self.shape_of(*a)[1]);
                    let mut da = vec![0.0; rows * cols];
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..cols {
                            da[idx * cols + c] += dy[r * cols + c];
                        }
                    }
                    self.accumulate_vec(*a, da, grads);
                }
            }
            Op::Softmax { a, axis } => {
                if self.requires(*a) {
                    let y = &node.value;
                    let (outer, axis_len, inner) = split_axis(&node.shape, *axis);
                    let mut da = vec![0.0; dy.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * axis_len * inner + i;
                            let mut dot = 0.0;
                            for s in 0..axis_len {
                                let idx = base + s * inner;
                                dot += dy[idx] * y[idx];
                            }
                            for s in 0..axis_len {
                                let idx = base + s * inner;
                                da[idx] = y[idx] * (dy[idx] - dot);
                            }
                        }
                    }
                    self.accumulate_vec(*a, da, grads);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (rows, cols) = (node.shape[0], node.shape[1]);
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let need_x = self.requires(*x);
                let need_g = self.requires(*gain);
                let need_b = self.requires(*bias);
                let mut dx = if need_x { vec![0.0; rows * cols] } else { Vec::new() };
                let mut dg = if need_g { vec![0.0; cols] } else { Vec::new() };
                let mut db = if need_b { vec![0.0; cols] } else { Vec::new() };
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    let dyr = &dy[r * cols..(r + 1) * cols];
                    if need_g || need_b {
                        for c in 0..cols {
                            let xhat = (row[c] - mean) * inv;
                            if need_g {
                                dg[c] += dyr[c] * xhat;
                            }
                            if need_b {
                                db[c] += dyr[c];
                            }
                        }
                    }
                    if need_x {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let xhat = (row[c] - mean) * inv;
                            let dxhat = dyr[c] * gv[c];
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let xhat = (row[c] - mean) * inv;
                            let dxhat = dyr[c] * gv[c];
                            dx[r * cols + c] = (dxhat - m1 - xhat * m2) * inv;
                        }
                    }
                }
                if need_x {
                    self.accumulate_vec(*x, dx, grads);
                }
                if need_g {
                    self.accumulate_vec(*gain, dg, grads);
                }
                if need_b {
                    self.accumulate_vec(*bias, db, grads);
                }
            }
            Op::Gelu { x } => {
                if self.requires(*x) {
                    let xv = self.value(*x);
                    let da: Vec<f64> = dy
                        .iter()
                        .zip(xv.iter())
                        .map(|(g, &v)| g * gelu_grad_scalar(v))
                        .collect();
                    self.accumulate_vec(*x, da, grads);
                }
            }
            Op::Sum { x } => {
                if self.requires(*x) {
                    let n = self.value(*x).len();
                    self.accumulate_vec(*x, vec![dy[0]; n], grads);
                }
            }
            Op::MeanOf { xs } => {
                let share = dy[0] / xs.len() as f64;
                for &x in xs {
                    if self.requires(x) {
                        self.accumulate_vec(x, vec![share], grads);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.requires(*logits) {
                    let rows = labels.len();
                    let cols = probs.len() / rows;
                    let scale = dy[0] / rows as f64;
                    let mut dl = probs.as_ref().clone();
                    for r in 0..rows {
                        dl[r * cols + labels[r]] -= 1.0;
                    }
                    for v in dl.iter_mut() {
                        *v *= scale;
                    }
                    self.accumulate_vec(*logits, dl, grads);
                }
            }
            Op::Reshape { x } => {
                if self.requires(*x) {
                    self.accumulate_vec(*x, dy.to_vec(), grads);
                }
            }
        }
    }

    fn accumulate(&self, id: NodeId, contribution: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        if !self.requires(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution.to_vec()),
        }
    }

    fn accumulate_vec(&self, id: NodeId, contribution: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>) {
        if !self.requires(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let x = a[i * k + kk];
            if x != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, axis_len, inner)
}

fn softmax_slice(data: &mut [f64], base: usize, axis_len: usize, stride: usize) {
    let mut max = f64::NEG_INFINITY;
    for s in 0..axis_len {
        max = max.max(data[base + s * stride]);
    }
    let mut denom = 0.0;
    for s in 0..axis_len {
        let e = (data[base + s * stride] - max).exp();
        data[base + s * stride] = e;
        denom += e;
    }
    for s in 0..axis_len {
        data[base + s * stride] /= denom;
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608028654;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(&t2(2, 2, &[2.0, 3.0, 4.0, 5.0]));
        let i = tape.constant(&t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(&a, &i).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_dot() {
        let mut tape = Tape::new();
        let a = tape.constant(&t2(1, 2, &[1.0, 2.0]));
        let b = tape.constant(&t2(2, 1, &[3.0, 4.0]));
        let y = tape.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.item(), 11.0);
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::new();
        let a = tape.constant(&t2(2, 3, &[0.0; 6]));
        let b = tape.constant(&t2(2, 2, &[0.0; 4]));
        let err = tape.matmul(&a, &b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(&a, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let b = tape.constant(&Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap());
        let z = tape.softmax(&b, 0).unwrap();
        assert!(z.all_finite());
        assert!((z.data()[0] - 1.0).abs() < 1e-12);
        assert!((z.data()[0] + z.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.constant(&t2(3, 4, &[
            0.3, -1.2, 2.0, 0.1, 5.0, 5.0, 5.0, 5.0, -2.0, 0.0, 2.0, 4.0,
        ]));
        let y = tape.softmax(&a, 1).unwrap();
        for r in 0..3 {
            let s: f64 = (0..4).map(|c| y.at2(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-14, "row {r} sums to {s}");
        }
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(&t2(1, 4, &[3.0, 3.0, 3.0, 3.0]));
        let gain = tape.constant(&Tensor::from_vec(&[4], vec![1.0; 4]).unwrap());
        let bias = tape.constant(&Tensor::from_vec(&[4], vec![0.5; 4]).unwrap());
        let y = tape.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        for &v in y.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_gain_yields_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(&t2(2, 3, &[1.0, -2.0, 5.0, 0.0, 0.1, -0.3]));
        let gain = tape.constant(&Tensor::zeros(&[3]));
        let bias = tape.constant(&Tensor::from_vec(&[3], vec![7.0, 8.0, 9.0]).unwrap());
        let y = tape.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        assert_eq!(y.data(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn gelu_endpoints() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(&t2(1, 2, &[0.0, 0.0]));
        let loss = tape.cross_entropy_logits(&logits, &[0]).unwrap();
        assert!((loss.item() - 0.6931471805599453).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let raw = t2(2, 3, &[0.2, -0.4, 1.1, 2.0, 0.0, -1.0]);
        let logits = tape.leaf(&raw);
        let loss = tape.cross_entropy_logits(&logits, &[2, 0]).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.for_tensor(&logits).unwrap();

        for r in 0..2 {
            let row = &raw.data()[r * 3..(r + 1) * 3];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for c in 0..3 {
                let p = (row[c] - max).exp() / denom;
                let onehot = if (r == 0 && c == 2) || (r == 1 && c == 0) { 1.0 } else { 0.0 };
                let expected = (p - onehot) / 2.0;
                assert!(
                    (g.at2(r, c) - expected).abs() < 1e-10,
                    "grad[{r},{c}] = {}, expected {expected}",
                    g.at2(r, c)
                );
            }
        }
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.sum(&x).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.for_tensor(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_is_two_x() {
        let mut tape = Tape::new();
        let raw = Tensor::from_vec(&[3], vec![0.5, -1.5, 2.0]).unwrap();
        let x = tape.leaf(&raw);
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum(&sq).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.for_tensor(&x).unwrap().data(), &[1.0, -3.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let err = tape.backward(&x).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }

    #[test]
    fn backward_skips_constants() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(&t2(2, 2, &[0.1, 0.2, 0.3, 0.4]));
        let y = tape.matmul(&x, &w).unwrap();
        let s = tape.sum(&y).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert!(grads.for_tensor(&w).is_none());
        assert!(grads.for_tensor(&x).is_some());
    }

    #[test]
    fn backward_is_bitwise_repeatable() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(2, 3, &[0.3, -0.7, 1.9, 0.01, 4.2, -2.2]));
        let g = tape.gelu(&x).unwrap();
        let sm = tape.softmax(&g, 1).unwrap();
        let s = tape.sum(&sm).unwrap();
        let a = tape.backward(&s).unwrap().for_tensor(&x).unwrap();
        let b = tape.backward(&s).unwrap().for_tensor(&x).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn chained_tapes_match_single_tape() {
        // gradient of f(g(x)) computed on one tape vs two chained tapes
        let raw = t2(2, 2, &[0.4, -0.2, 1.3, 0.8]);

        let mut single = Tape::new();
        let x = single.leaf(&raw);
        let g = single.gelu(&x).unwrap();
        let f = single.mul(&g, &g).unwrap();
        let s = single.sum(&f).unwrap();
        let want = single.backward(&s).unwrap().for_tensor(&x).unwrap();

        let mut inner = Tape::new();
        let xi = inner.leaf(&raw);
        let gi = inner.gelu(&xi).unwrap();

        let mut outer = Tape::new();
        let go = outer.leaf(&gi.detach());
        let fo = outer.mul(&go, &go).unwrap();
        let so = outer.sum(&fo).unwrap();
        let dg = outer.backward(&so).unwrap().for_tensor(&go).unwrap();

        let got = inner
            .backward_seeded(&gi, &dg)
            .unwrap()
            .for_tensor(&xi)
            .unwrap();
        assert!(want.max_abs_diff(&got) < 1e-12);
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let mut tape = Tape::new();
        let table = tape.leaf(&t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = tape.gather_rows(&table, &[1, 1, 0]).unwrap();
        assert_eq!(picked.data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = tape.sum(&picked).unwrap();
        let g = tape.backward(&s).unwrap().for_tensor(&table).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t2(2, 3, &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]));
        let cat = tape.concat_cols(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.shape(), &[2, 5]);
        assert_eq!(cat.data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        let mid = tape.slice_cols(&cat, 1, 2).unwrap();
        assert_eq!(mid.data(), &[2.0, 5.0, 4.0, 8.0]);
        let s = tape.sum(&mid).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.for_tensor(&a).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(grads.for_tensor(&b).unwrap().data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_rows_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(1, 2, &[1.0, 2.0]));
        let b = tape.leaf(&t2(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let cat = tape.concat_rows(&a, &b).unwrap();
        assert_eq!(cat.shape(), &[3, 2]);
        let doubled = tape.scale(&cat, 2.0).unwrap();
        let s = tape.sum(&doubled).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.for_tensor(&a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.for_tensor(&b).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let t = tape.transpose(&a).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let tt = tape.transpose(&t).unwrap();
        assert!(tt.bits_eq(&a.detach().reshaped(&[2, 3]).unwrap()));
    }

    #[test]
    fn ops_reject_foreign_tensors() {
        let mut tape = Tape::new();
        let unregistered = t2(2, 2, &[0.0; 4]);
        let err = tape.sum(&unregistered).unwrap_err();
        assert!(matches!(err, TensorError::NotOnTape { op: "sum" }));
    }
}
