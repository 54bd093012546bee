//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so every node's inputs precede it
//! and the backward sweep is a single reverse pass over the list.

use std::collections::BTreeMap;

use super::{DiffError, Tensor};

/// Norms below this are treated as zero by `l2_normalize`, `cosine` and
/// `euclidean`; the result and its gradient are then zero.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded primitive together with its input node ids.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    /// Constant substituted for a masked modality embedding. Behaves like a
    /// constant leaf but is counted separately so masked passes can be probed.
    Masked,
    Add(NodeId, NodeId),
    /// `[r,c] + [c]`, bias broadcast over rows.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[r,c] * [r,1]`, one scale per row.
    ScaleRows(NodeId, NodeId),
    MulScalar(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// Column-wise concatenation of row-aligned inputs.
    Concat(Vec<NodeId>),
    Column(NodeId, usize),
    /// Selects rows by index (repeats allowed).
    GatherRows(NodeId, Vec<usize>),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Row-wise `softmax(x / temperature)`.
    Softmax(NodeId, f64),
    L2Normalize(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Log(NodeId),
    /// Mean over rows of softmax cross-entropy against class indices.
    CrossEntropy(NodeId, Vec<usize>),
    /// Mean over all entries of sigmoid cross-entropy against 0/1 targets.
    BceWithLogits(NodeId, Tensor),
    Mse(NodeId, NodeId),
    /// Row-wise cosine similarity, `[r,1]`.
    Cosine(NodeId, NodeId),
    /// Row-wise Euclidean distance, `[r,1]`.
    Euclidean(NodeId, NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Masked => "masked",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScaleRows(..) => "scale_rows",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Concat(..) => "concat",
            Op::Column(..) => "column",
            Op::GatherRows(..) => "gather_rows",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Log(..) => "log",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::BceWithLogits(..) => "bce_with_logits",
            Op::Mse(..) => "mse",
            Op::Cosine(..) => "cosine",
            Op::Euclidean(..) => "euclidean",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Masked => vec![],
            Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleRows(a, b)
            | Op::MatMul(a, b)
            | Op::Mse(a, b)
            | Op::Cosine(a, b)
            | Op::Euclidean(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
            Op::MulScalar(a, _)
            | Op::AddScalar(a, _)
            | Op::Column(a, _)
            | Op::GatherRows(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a, _)
            | Op::L2Normalize(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Log(a)
            | Op::CrossEntropy(a, _)
            | Op::BceWithLogits(a, _) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

type Result<T> = std::result::Result<T, DiffError>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded node in evaluation order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Number of recorded nodes per primitive name.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for node in &self.nodes {
            *counts.entry(node.op.name()).or_insert(0) += 1;
        }
        counts
    }

    pub fn count(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    fn push_leaf(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf (parameter or input whose gradient is wanted).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, Op::Leaf, false)
    }

    pub fn masked(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, Op::Masked, false)
    }

    /// Overwrite a leaf's value. Dependent nodes keep stale values until
    /// [`Tape::replay`] is called.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf | Op::Masked) {
            return Err(DiffError::Contract(format!("node {} is not a leaf", id.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "set_leaf",
                left: node.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Record a primitive and compute its value.
    pub fn apply(&mut self, op: Op) -> Result<NodeId> {
        if matches!(op, Op::Leaf | Op::Masked) {
            return Err(DiffError::Contract("leaves are created with param/constant".into()));
        }
        let inputs = op.inputs();
        if let Some(bad) = inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            return Err(DiffError::Contract(format!("unknown node {}", bad.0)));
        }
        let value = self.eval(&op)?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Recompute every non-leaf node from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf | Op::Masked) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.nodes[i].value = self.eval(&op)?;
        }
        Ok(())
    }

    fn v(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        Ok(match op {
            Op::Leaf | Op::Masked => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                same_shape("add", a, b)?;
                a.zip_map(b, |x, y| x + y)
            }
            Op::Sub(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                same_shape("sub", a, b)?;
                a.zip_map(b, |x, y| x - y)
            }
            Op::Mul(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                same_shape("mul", a, b)?;
                a.zip_map(b, |x, y| x * y)
            }
            Op::AddRow(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                if b.len() != a.cols() || b.rows() != 1 {
                    return Err(mismatch("add_row", a, b));
                }
                let c = a.cols();
                let mut out = a.clone();
                for (i, x) in out.data_mut().iter_mut().enumerate() {
                    *x += b.data()[i % c];
                }
                out
            }
            Op::ScaleRows(a, s) => {
                let (a, s) = (self.v(*a), self.v(*s));
                if s.cols() != 1 || s.rows() != a.rows() {
                    return Err(mismatch("scale_rows", a, s));
                }
                let c = a.cols();
                let mut out = a.clone();
                for (i, x) in out.data_mut().iter_mut().enumerate() {
                    *x *= s.data()[i / c];
                }
                out
            }
            Op::MulScalar(a, k) => self.v(*a).map(|x| x * k),
            Op::AddScalar(a, k) => self.v(*a).map(|x| x + k),
            Op::MatMul(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                if a.cols() != b.rows() || b.shape().len() != 2 {
                    return Err(mismatch("matmul", a, b));
                }
                let (r, k, c) = (a.rows(), a.cols(), b.cols());
                Tensor::matrix(r, c, Tensor::matmul_raw(a.data(), b.data(), r, k, c))
            }
            Op::Concat(xs) => {
                let first = xs.first().ok_or_else(|| DiffError::Contract("concat of nothing".into()))?;
                let rows = self.v(*first).rows();
                for x in xs {
                    if self.v(*x).rows() != rows {
                        return Err(mismatch("concat", self.v(*first), self.v(*x)));
                    }
                }
                let total: usize = xs.iter().map(|x| self.v(*x).cols()).sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for x in xs {
                        data.extend_from_slice(self.v(*x).row(r));
                    }
                }
                Tensor::matrix(rows, total, data)
            }
            Op::Column(a, j) => {
                let a = self.v(*a);
                if *j >= a.cols() {
                    return Err(DiffError::Contract(format!(
                        "column {j} out of range for shape {:?}",
                        a.shape()
                    )));
                }
                let data = (0..a.rows()).map(|r| a.row(r)[*j]).collect();
                Tensor::matrix(a.rows(), 1, data)
            }
            Op::GatherRows(a, rows) => {
                let a = self.v(*a);
                if rows.is_empty() {
                    return Err(DiffError::Contract("gather_rows needs at least one row".into()));
                }
                if let Some(r) = rows.iter().find(|&&r| r >= a.rows()) {
                    return Err(DiffError::Contract(format!("row {r} out of range for shape {:?}", a.shape())));
                }
                let mut data = Vec::with_capacity(rows.len() * a.cols());
                for &r in rows {
                    data.extend_from_slice(a.row(r));
                }
                Tensor::matrix(rows.len(), a.cols(), data)
            }
            Op::Relu(a) => self.v(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Sigmoid(a) => self.v(*a).map(sigmoid),
            Op::Tanh(a) => self.v(*a).map(f64::tanh),
            Op::Softmax(a, t) => {
                if !(*t > 0.0) {
                    return Err(DiffError::Domain { op: "softmax", detail: format!("temperature {t} must be > 0") });
                }
                softmax_rows(self.v(*a), *t)
            }
            Op::L2Normalize(a) => {
                let a = self.v(*a);
                let c = a.cols();
                let mut out = a.clone();
                for row in out.data_mut().chunks_mut(c) {
                    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n < ZERO_NORM {
                        row.fill(0.0);
                    } else {
                        row.iter_mut().for_each(|x| *x /= n);
                    }
                }
                out
            }
            Op::Sum(a) => Tensor::scalar(self.v(*a).sum()),
            Op::Mean(a) => {
                let a = self.v(*a);
                Tensor::scalar(a.sum() / a.len() as f64)
            }
            Op::RowSum(a) => {
                let a = self.v(*a);
                let data = (0..a.rows()).map(|r| a.row(r).iter().sum()).collect();
                Tensor::matrix(a.rows(), 1, data)
            }
            Op::Square(a) => self.v(*a).map(|x| x * x),
            Op::Sqrt(a) => {
                let a = self.v(*a);
                if let Some(x) = a.data().iter().find(|x| **x < 0.0) {
                    return Err(DiffError::Domain { op: "sqrt", detail: format!("negative input {x}") });
                }
                a.map(f64::sqrt)
            }
            Op::Log(a) => {
                let a = self.v(*a);
                if let Some(x) = a.data().iter().find(|x| !(**x > 0.0)) {
                    return Err(DiffError::Domain { op: "log", detail: format!("non-positive input {x}") });
                }
                a.map(f64::ln)
            }
            Op::CrossEntropy(a, targets) => {
                let a = self.v(*a);
                check_targets(a, targets)?;
                let mut total = 0.0;
                for (r, &t) in targets.iter().enumerate() {
                    let row = a.row(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                    total += lse - row[t];
                }
                Tensor::scalar(total / targets.len() as f64)
            }
            Op::BceWithLogits(a, t) => {
                let a = self.v(*a);
                same_shape("bce_with_logits", a, t)?;
                let total: f64 = a
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                    .sum();
                Tensor::scalar(total / a.len() as f64)
            }
            Op::Mse(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                same_shape("mse", a, b)?;
                let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
                Tensor::scalar(total / a.len() as f64)
            }
            Op::Cosine(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                same_shape("cosine", a, b)?;
                let data = (0..a.rows())
                    .map(|r| {
                        let (x, y) = (a.row(r), b.row(r));
                        let (nx, ny) = (norm(x), norm(y));
                        if nx < ZERO_NORM || ny < ZERO_NORM {
                            0.0
                        } else {
                            dot(x, y) / (nx * ny)
                        }
                    })
                    .collect();
                Tensor::matrix(a.rows(), 1, data)
            }
            Op::Euclidean(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                same_shape("euclidean", a, b)?;
                let data = (0..a.rows())
                    .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                    .collect();
                Tensor::matrix(a.rows(), 1, data)
            }
        })
    }

    /// Reverse sweep from a scalar node. Returns gradients for every leaf
    /// created with [`Tape::param`].
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.v(loss);
        if !loss_value.is_scalar() {
            return Err(DiffError::NonScalarLoss { shape: loss_value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Masked) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gin) in self.local_grads(&node.op, &node.value, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gin),
                    slot @ None => *slot = Some(gin),
                }
            }
        }

        let mut out = BTreeMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out.insert(NodeId(i), g.unwrap_or_else(|| Tensor::zeros(node.value.shape())));
            }
        }
        // Leaves recorded after the loss node cannot influence it.
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out.insert(NodeId(i), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn local_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        match op {
            Op::Leaf | Op::Masked => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                vec![(*a, g.zip_map(bv, |x, y| x * y)), (*b, g.zip_map(av, |x, y| x * y))]
            }
            Op::AddRow(a, b) => {
                let bv = self.v(*b);
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for r in 0..g.rows() {
                    for (acc, x) in gb.iter_mut().zip(g.row(r)) {
                        *acc += x;
                    }
                }
                vec![(*a, g.clone()), (*b, Tensor::new(bv.shape().to_vec(), gb).expect("bias shape"))]
            }
            Op::ScaleRows(a, s) => {
                let (av, sv) = (self.v(*a), self.v(*s));
                let c = g.cols();
                let mut ga = g.clone();
                for (i, x) in ga.data_mut().iter_mut().enumerate() {
                    *x *= sv.data()[i / c];
                }
                let gs = (0..g.rows()).map(|r| dot(g.row(r), av.row(r))).collect();
                vec![(*a, ga), (*s, Tensor::new(sv.shape().to_vec(), gs).expect("scale shape"))]
            }
            Op::MulScalar(a, k) => vec![(*a, g.map(|x| x * k))],
            Op::AddScalar(a, _) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let (r, k, c) = (av.rows(), av.cols(), bv.cols());
                let bt = bv.transpose();
                let at = av.transpose();
                let ga = Tensor::matmul_raw(g.data(), bt.data(), r, c, k);
                let gb = Tensor::matmul_raw(at.data(), g.data(), k, r, c);
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), ga).expect("matmul grad")),
                    (*b, Tensor::new(bv.shape().to_vec(), gb).expect("matmul grad")),
                ]
            }
            Op::Concat(xs) => {
                let rows = g.rows();
                let mut offset = 0;
                xs.iter()
                    .map(|x| {
                        let xv = self.v(*x);
                        let w = xv.cols();
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        (*x, Tensor::new(xv.shape().to_vec(), data).expect("concat grad"))
                    })
                    .collect()
            }
            Op::Column(a, j) => {
                let av = self.v(*a);
                let c = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    ga.data_mut()[r * c + j] = g.data()[r];
                }
                vec![(*a, ga)]
            }
            Op::GatherRows(a, rows) => {
                let av = self.v(*a);
                let c = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        ga.data_mut()[r * c + j] += g.data()[k * c + j];
                    }
                }
                vec![(*a, ga)]
            }
            Op::Relu(a) => {
                let av = self.v(*a);
                vec![(*a, g.zip_map(av, |gx, x| if x > 0.0 { gx } else { 0.0 }))]
            }
            Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |gx, y| gx * y * (1.0 - y)))],
            Op::Tanh(a) => vec![(*a, g.zip_map(out, |gx, y| gx * (1.0 - y * y)))],
            Op::Softmax(a, t) => {
                let c = out.cols();
                let mut ga = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let inner = dot(y, gy);
                    for j in 0..c {
                        ga.data_mut()[r * c + j] = y[j] * (gy[j] - inner) / t;
                    }
                }
                vec![(*a, ga)]
            }
            Op::L2Normalize(a) => {
                let av = self.v(*a);
                let c = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let n = norm(av.row(r));
                    if n < ZERO_NORM {
                        continue;
                    }
                    let (y, gy) = (out.row(r), g.row(r));
                    let inner = dot(y, gy);
                    for j in 0..c {
                        ga.data_mut()[r * c + j] = (gy[j] - y[j] * inner) / n;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Sum(a) => vec![(*a, Tensor::filled(self.v(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let av = self.v(*a);
                vec![(*a, Tensor::filled(av.shape(), g.item() / av.len() as f64))]
            }
            Op::RowSum(a) => {
                let av = self.v(*a);
                let c = av.cols();
                let data = (0..av.len()).map(|i| g.data()[i / c]).collect();
                vec![(*a, Tensor::new(av.shape().to_vec(), data).expect("row_sum grad"))]
            }
            Op::Square(a) => vec![(*a, g.zip_map(self.v(*a), |gx, x| 2.0 * x * gx))],
            Op::Sqrt(a) => vec![(*a, g.zip_map(out, |gx, y| if y > 0.0 { gx / (2.0 * y) } else { 0.0 }))],
            Op::Log(a) => vec![(*a, g.zip_map(self.v(*a), |gx, x| gx / x))],
            Op::CrossEntropy(a, targets) => {
                let av = self.v(*a);
                let scale = g.item() / targets.len() as f64;
                let mut ga = softmax_rows(av, 1.0);
                let c = av.cols();
                for (r, &t) in targets.iter().enumerate() {
                    ga.data_mut()[r * c + t] -= 1.0;
                }
                ga.data_mut().iter_mut().for_each(|x| *x *= scale);
                vec![(*a, ga)]
            }
            Op::BceWithLogits(a, t) => {
                let av = self.v(*a);
                let scale = g.item() / av.len() as f64;
                vec![(*a, av.zip_map(t, |z, y| (sigmoid(z) - y) * scale))]
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let scale = 2.0 * g.item() / av.len() as f64;
                let ga = av.zip_map(bv, |x, y| (x - y) * scale);
                let gb = ga.map(|x| -x);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let c = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                for r in 0..av.rows() {
                    let (x, y) = (av.row(r), bv.row(r));
                    let (nx, ny) = (norm(x), norm(y));
                    if nx < ZERO_NORM || ny < ZERO_NORM {
                        continue;
                    }
                    let cos = out.data()[r];
                    let gr = g.data()[r];
                    for j in 0..c {
                        let (xh, yh) = (x[j] / nx, y[j] / ny);
                        ga.data_mut()[r * c + j] = gr * (yh - cos * xh) / nx;
                        gb.data_mut()[r * c + j] = gr * (xh - cos * yh) / ny;
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Euclidean(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let c = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let d = out.data()[r];
                    if d < ZERO_NORM {
                        continue;
                    }
                    let gr = g.data()[r];
                    let (x, y) = (av.row(r), bv.row(r));
                    for j in 0..c {
                        ga.data_mut()[r * c + j] = gr * (x[j] - y[j]) / d;
                    }
                }
                let gb = ga.map(|x| -x);
                vec![(*a, ga), (*b, gb)]
            }
        }
    }

    // Convenience wrappers over `apply`.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add(a, b))
    }
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Op::AddRow(a, bias))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul(a, b))
    }
    pub fn scale_rows(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.apply(Op::ScaleRows(a, s))
    }
    pub fn mul_scalar(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.apply(Op::MulScalar(a, k))
    }
    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.apply(Op::AddScalar(a, k))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul(a, b))
    }
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Concat(xs.to_vec()))
    }
    pub fn column(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        self.apply(Op::Column(a, j))
    }
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.apply(Op::GatherRows(a, rows.to_vec()))
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu(a))
    }
    /// `max(0, x)`; the hinge used by margin losses.
    pub fn hinge(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid(a))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh(a))
    }
    pub fn softmax(&mut self, a: NodeId, temperature: f64) -> Result<NodeId> {
        self.apply(Op::Softmax(a, temperature))
    }
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::L2Normalize(a))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean(a))
    }
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::RowSum(a))
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Square(a))
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sqrt(a))
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log(a))
    }
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.apply(Op::CrossEntropy(logits, targets.to_vec()))
    }
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Tensor) -> Result<NodeId> {
        self.apply(Op::BceWithLogits(logits, targets))
    }
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mse(a, b))
    }
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Cosine(a, b))
    }
    pub fn euclidean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Euclidean(a, b))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise `softmax(x / temperature)` with max subtraction.
pub fn softmax_rows(x: &Tensor, temperature: f64) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - m) / temperature).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a, b));
    }
    Ok(())
}

fn check_targets(logits: &Tensor, targets: &[usize]) -> Result<()> {
    if targets.len() != logits.rows() {
        return Err(DiffError::ShapeMismatch {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    if let Some(t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(DiffError::Contract(format!("class index {t} >= {} classes", logits.cols())));
    }
    Ok(())
}
