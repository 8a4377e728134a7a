//! Per-forward-pass tape for reverse-mode differentiation.
//!
//! Every operation appends one node whose inputs precede it, so the node
//! list is already in topological order and `backward` is a single reverse
//! sweep. A tape is built, differentiated once and dropped; parameters
//! live in a [`ParamStore`] and are copied in as leaves.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    Param,
    StopGradient,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows { input: NodeId, start: usize },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    LogSigmoid(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SquaredNorm(NodeId),
    RowNorm(NodeId),
    SoftmaxCe { logits: NodeId, targets: Vec<usize> },
    Gather { table: NodeId, ids: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation kinds accepted by [`Graph::forward_primitive`].
#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveKind {
    MatMul,
    Add,
    Concat,
    Relu,
    Sigmoid,
    Tanh,
    Log,
    MulScalar(f64),
    Sum,
    Mean,
    SquaredNorm,
    SoftmaxCrossEntropy(Vec<usize>),
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A differentiable leaf whose gradient can be read back.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Leaf holding the current value of a stored parameter. Repeated
    /// requests for the same parameter share one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_leaves.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Param, true);
        self.param_leaves.insert(id, n);
        n
    }

    /// Identity in the forward pass; blocks all gradient flow backward.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `a[m,n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        let bv = self.value(bias);
        if bv.len() != n || bv.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut v = Tensor::zeros(&[m, n]);
        {
            let (av, bd) = (self.value(a).data(), self.value(bias).data());
            let out = v.data_mut();
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = av[i * n + j] + bd[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(v, Op::AddRow(a, bias), ng))
    }

    /// `a[m,n] * col[m,1]`, scaling each row.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        let cv = self.value(col);
        if cv.len() != m || cv.cols() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                lhs: self.value(a).shape().to_vec(),
                rhs: cv.shape().to_vec(),
            });
        }
        let mut v = Tensor::zeros(&[m, n]);
        {
            let (av, cd) = (self.value(a).data(), self.value(col).data());
            let out = v.data_mut();
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = av[i * n + j] * cd[i];
                }
            }
        }
        let ng = self.needs(a) || self.needs(col);
        Ok(self.push(v, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Concatenates matrices along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let m = parts.first().map(|&p| self.value(p).rows()).ok_or(Error::EmptyBatch("concat"))?;
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = parts.first().map(|&p| self.value(p).cols()).ok_or(Error::EmptyBatch("concat"))?;
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).cols() != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            data.extend_from_slice(self.value(p).data());
        }
        let m = data.len() / n.max(1);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(input).dims2();
        if start + len > m {
            return Err(Error::InvalidArgument(format!(
                "slice_rows {start}..{} out of bounds for {m} rows",
                start + len
            )));
        }
        let data = self.value(input).data()[start * n..(start + len) * n].to_vec();
        let ng = self.needs(input);
        Ok(self.push(Tensor::matrix(len, n, data)?, Op::SliceRows { input, start }, ng))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(tensor::sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidArgument("log of a negative value".into()));
        }
        let v = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        Ok(self.push(v, Op::Log(a), ng))
    }

    /// `log(sigmoid(a))`, stable for large logits.
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(tensor::log_sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::LogSigmoid(a), ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::EmptyBatch("mean"));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.needs(a);
        Ok(self.push(v, Op::Mean(a), ng))
    }

    /// Sum of squared entries.
    pub fn squared_norm(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).squared_norm());
        let ng = self.needs(a);
        self.push(v, Op::SquaredNorm(a), ng)
    }

    /// Euclidean norm of every row, shape `[m, 1]`.
    pub fn row_norm(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (m, _) = t.dims2();
        let data = (0..m).map(|i| t.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let ng = self.needs(a);
        self.push(Tensor::column(data), Op::RowNorm(a), ng)
    }

    /// Per-row cross entropy of `softmax(logits)` against integer targets,
    /// shape `[m, 1]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        let (m, n) = t.dims2();
        if targets.len() != m {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= n) {
            return Err(Error::InvalidArgument(format!("target class {bad} out of range for {n} classes")));
        }
        let data = (0..m)
            .map(|i| {
                let row = t.row_slice(i);
                tensor::log_sum_exp(row) - row[targets[i]]
            })
            .collect();
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::column(data),
            Op::SoftmaxCe { logits, targets: targets.to_vec() },
            ng,
        ))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::InvalidArgument(format!("row {bad} out of range for table of {} rows", t.rows())));
        }
        let v = t.select_rows(ids);
        let ng = self.needs(table);
        Ok(self.push(v, Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    /// Uniform entry point over the primitive set; dispatches to the
    /// dedicated methods above.
    pub fn forward_primitive(&mut self, kind: PrimitiveKind, inputs: &[NodeId]) -> Result<NodeId> {
        let want = match kind {
            PrimitiveKind::MatMul | PrimitiveKind::Add => 2,
            PrimitiveKind::Concat => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != want {
            return Err(Error::InvalidArgument(format!("{kind:?} takes {want} inputs, got {}", inputs.len())));
        }
        let x = inputs[0];
        match kind {
            PrimitiveKind::MatMul => self.matmul(x, inputs[1]),
            PrimitiveKind::Add => self.add(x, inputs[1]),
            PrimitiveKind::Concat => self.concat_cols(inputs),
            PrimitiveKind::Relu => Ok(self.relu(x)),
            PrimitiveKind::Sigmoid => Ok(self.sigmoid(x)),
            PrimitiveKind::Tanh => Ok(self.tanh(x)),
            PrimitiveKind::Log => self.log(x),
            PrimitiveKind::MulScalar(s) => Ok(self.scale(x, s)),
            PrimitiveKind::Sum => Ok(self.sum(x)),
            PrimitiveKind::Mean => self.mean(x),
            PrimitiveKind::SquaredNorm => Ok(self.squared_norm(x)),
            PrimitiveKind::SoftmaxCrossEntropy(targets) => self.softmax_cross_entropy(x, &targets),
        }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        if !rv.item().is_finite() {
            return Err(Error::NonFinite("backward root".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, graph_len: self.nodes.len(), params: self.param_leaves.clone() })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, contrib: Tensor| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(t) => t.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Input | Op::Constant | Op::Param | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.dims2();
                let n = bv.cols();
                if self.nodes[a.0].needs_grad {
                    let mut ga = Tensor::zeros(av.shape());
                    tensor::matmul_a_bt_acc(g.data(), bv.data(), ga.data_mut(), m, k, n);
                    acc(*a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = Tensor::zeros(bv.shape());
                    tensor::matmul_at_b_acc(av.data(), g.data(), gb.data_mut(), m, k, n);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let (m, n) = g.dims2();
                let mut gb = Tensor::zeros(val(*bias).shape());
                for i in 0..m {
                    for (o, &x) in gb.data_mut().iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                        *o += x;
                    }
                }
                acc(*bias, gb);
            }
            Op::MulCol(a, col) => {
                let (m, n) = g.dims2();
                let (av, cv) = (val(*a), val(*col));
                let mut ga = Tensor::zeros(av.shape());
                let mut gc = Tensor::zeros(cv.shape());
                for i in 0..m {
                    let c = cv.data()[i];
                    let mut s = 0.0;
                    for j in 0..n {
                        let gij = g.data()[i * n + j];
                        ga.data_mut()[i * n + j] = gij * c;
                        s += gij * av.data()[i * n + j];
                    }
                    gc.data_mut()[i] = s;
                }
                acc(*a, ga);
                acc(*col, gc);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::ConcatCols(parts) => {
                let (m, n) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    let mut gp = Tensor::zeros(pv.shape());
                    for i in 0..m {
                        gp.data_mut()[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data()[i * n + offset..i * n + offset + w]);
                    }
                    offset += w;
                    acc(p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let len = pv.len();
                    let gp = Tensor::new(pv.shape().to_vec(), g.data()[offset..offset + len].to_vec())
                        .expect("slice matches part shape");
                    offset += len;
                    acc(p, gp);
                }
            }
            Op::SliceRows { input, start } => {
                let iv = val(*input);
                let n = iv.cols();
                let mut gi = Tensor::zeros(iv.shape());
                gi.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                acc(*input, gi);
            }
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gx, x| if x > 0.0 { gx } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gx, s| gx * s * (1.0 - s))),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |gx, t| gx * (1.0 - t * t))),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |gx, x| gx / x)),
            Op::LogSigmoid(a) => acc(*a, g.zip_map(val(*a), |gx, x| gx * tensor::sigmoid(-x))),
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let av = val(*a);
                acc(*a, Tensor::full(av.shape(), g.item() / av.len() as f64));
            }
            Op::SquaredNorm(a) => {
                let s = 2.0 * g.item();
                acc(*a, val(*a).map(|x| s * x));
            }
            Op::RowNorm(a) => {
                let av = val(*a);
                let (m, n) = av.dims2();
                let mut ga = Tensor::zeros(av.shape());
                for i in 0..m {
                    let norm = node.value.data()[i];
                    if norm > 0.0 {
                        let s = g.data()[i] / norm;
                        for j in 0..n {
                            ga.data_mut()[i * n + j] = s * av.data()[i * n + j];
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::SoftmaxCe { logits, targets } => {
                let lv = val(*logits);
                let (m, n) = lv.dims2();
                let mut gl = Tensor::zeros(lv.shape());
                for i in 0..m {
                    let gi = g.data()[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let row = lv.row_slice(i);
                    let lse = tensor::log_sum_exp(row);
                    let out = &mut gl.data_mut()[i * n..(i + 1) * n];
                    for (j, o) in out.iter_mut().enumerate() {
                        *o = gi * (row[j] - lse).exp();
                    }
                    out[targets[i]] -= gi;
                }
                acc(*logits, gl);
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let n = tv.cols();
                let mut gt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * n..(r + 1) * n];
                    for (o, &x) in gt.data_mut()[id * n..(id + 1) * n].iter_mut().zip(src) {
                        *o += x;
                    }
                }
                acc(*table, gt);
            }
        }
    }
}

/// Gradient table produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    graph_len: usize,
    params: HashMap<ParamId, NodeId>,
}

impl Gradients {
    /// Gradient with respect to a node, or `None` when no gradient reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        debug_assert!(id.0 < self.graph_len);
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to a node; zeros of the node's shape when
    /// untouched.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
    }

    /// Gradient for every parameter in `store`, aligned with its ids.
    /// Parameters not used on the tape get zeros.
    pub fn param_table(&self, store: &ParamStore) -> ParamGrads {
        let grads = store
            .iter()
            .map(|(id, _, value)| {
                self.params
                    .get(&id)
                    .and_then(|n| self.get(*n))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(value.shape()))
            })
            .collect();
        ParamGrads { grads }
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.iter().map(|(_, _, v)| Tensor::zeros(v.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Global L2 norm over the selected parameters.
    pub fn norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter().map(|id| self.grads[id.0].squared_norm()).sum::<f64>().sqrt()
    }

    /// Rescales the selected gradients so their global norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_norm(&mut self, ids: &[ParamId], max_norm: f64) -> f64 {
        let norm = self.norm(ids);
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for id in ids {
                self.grads[id.0].scale_assign(s);
            }
        }
        norm
    }
}
