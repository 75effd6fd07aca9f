//! Tape of differentiable operations.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.
//! There is no broadcasting: every operation states the exact shapes it
//! accepts and rejects anything else.

use std::collections::{BTreeMap, HashMap};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddMany(Vec<NodeId>),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Relu(NodeId),
    Concat(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    GatherRows(NodeId, Vec<usize>),
    ReplaceRows {
        x: NodeId,
        row: NodeId,
        positions: Vec<usize>,
    },
    MeanOverIndices(NodeId, Vec<usize>),
    SqL2Distance(NodeId, NodeId),
    LogSumExp {
        x: NodeId,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        target: usize,
        probs: Vec<f64>,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation with a registry of named parameters.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    by_name: HashMap<String, NodeId>,
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Shift-stable `log(sum(exp(z)))`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row softmax of a plain slice.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn check_indices(op: &'static str, idx: &[usize], bound: usize) -> Result<()> {
    if let Some(&i) = idx.iter().find(|&&i| i >= bound) {
        return Err(Error::IndexOutOfRange {
            op,
            index: i,
            bound,
        });
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Value computed for a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.node(id)?.value.item()
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a named parameter. Registering the same name twice is an error.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = self.push(value, Op::Leaf, true);
        self.params.push((name.clone(), id));
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Node of a registered parameter.
    pub fn param(&self, name: &str) -> Result<NodeId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Registered parameter names in registration order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Matrix product `[m×k]·[k×n]`, or matrix-vector product `[m×k]·[k]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let ok = av.rank() == 2 && (bv.rank() == 2 || bv.rank() == 1) && av.cols() == bv.rows_for_matmul();
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k) = (av.rows(), av.cols());
        let n = if bv.rank() == 1 { 1 } else { bv.cols() };
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = ad[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a_ip * b;
                }
            }
        }
        let shape = if bv.rank() == 1 { vec![m] } else { vec![m, n] };
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), needs))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Elementwise sum of any number of same-shape nodes.
    pub fn add_many(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs.first().ok_or(Error::EmptyInput("add_many"))?;
        for &x in &xs[1..] {
            self.same_shape("add_many", first, x)?;
        }
        let mut data = self.nodes[first.0].value.data().to_vec();
        for &x in &xs[1..] {
            for (d, v) in data.iter_mut().zip(self.nodes[x.0].value.data()) {
                *d += v;
            }
        }
        let value = Tensor::new(self.nodes[first.0].value.shape().to_vec(), data)?;
        let needs = self.needs(xs);
        Ok(self.push(value, Op::AddMany(xs.to_vec()), needs))
    }

    /// Adds the vector `bias[n]` to every row of `x[m×n]` (or to a vector `x[n]`).
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (&self.node(x)?.value, &self.node(bias)?.value);
        if bv.rank() != 1 || xv.rank() == 0 || xv.cols() != bv.len() || xv.rank() > 2 {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let n = bv.len();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (d, b) in row.iter_mut().zip(bv.data()) {
                *d += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), needs))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let data = xv.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Scale(x, c), needs))
    }

    /// Adds the constant `c` to every element.
    pub fn shift(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let data = xv.data().iter().map(|v| v + c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Shift(x), needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        if xv.rank() != 2 {
            return Err(Error::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: xv.shape().to_vec(),
            });
        }
        let (m, n) = (xv.rows(), xv.cols());
        let d = xv.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), needs))
    }

    /// Softmax over the last axis (each row of a matrix, or the whole vector).
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        if xv.rank() == 0 || xv.rank() > 2 {
            return Err(Error::RankMismatch {
                op: "softmax_rows",
                expected: 2,
                shape: xv.shape().to_vec(),
            });
        }
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        data.chunks_mut(n).for_each(softmax_in_place);
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), needs))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (xv, gv, bv) = (
            &self.node(x)?.value,
            &self.node(gain)?.value,
            &self.node(bias)?.value,
        );
        if xv.rank() == 0 || xv.rank() > 2 || gv.shape() != [xv.cols()] || bv.shape() != [xv.cols()] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let n = xv.cols();
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.rows());
        for (r, row) in xv.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Gelu(x), needs))
    }

    /// `max(x, 0)` elementwise; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Relu(x), needs))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let mut data = Vec::new();
        for &x in xs {
            let xv = &self.node(x)?.value;
            if xv.rank() != 1 {
                return Err(Error::RankMismatch {
                    op: "concat",
                    expected: 1,
                    shape: xv.shape().to_vec(),
                });
            }
            data.extend_from_slice(xv.data());
        }
        let needs = self.needs(xs);
        Ok(self.push(Tensor::vector(data), Op::Concat(xs.to_vec()), needs))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let rows = self.node(first)?.value.rows();
        let mut total = 0;
        for &x in xs {
            let xv = &self.node(x)?.value;
            if xv.rank() != 2 || xv.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[first.0].value.shape().to_vec(),
                    right: xv.shape().to_vec(),
                });
            }
            total += xv.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.nodes[x.0].value.row(r));
            }
        }
        let needs = self.needs(xs);
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(xs.to_vec()), needs))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        if xv.rank() != 2 || start + len > xv.cols() || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: xv.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols { x, start }, needs))
    }

    /// Selects rows of `table` by index (embedding lookup). Indices may repeat.
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let tv = &self.node(table)?.value;
        if tv.rank() != 2 {
            return Err(Error::RankMismatch {
                op: "gather_rows",
                expected: 2,
                shape: tv.shape().to_vec(),
            });
        }
        if idx.is_empty() {
            return Err(Error::EmptyIndexSet);
        }
        check_indices("gather_rows", idx, tv.rows())?;
        let mut data = Vec::with_capacity(idx.len() * tv.cols());
        for &i in idx {
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), tv.cols()], data)?;
        let needs = self.needs(&[table]);
        Ok(self.push(value, Op::GatherRows(table, idx.to_vec()), needs))
    }

    /// Replaces the listed rows of `x[m×n]` with the vector `row[n]`.
    pub fn replace_rows(&mut self, x: NodeId, row: NodeId, positions: &[usize]) -> Result<NodeId> {
        let (xv, rv) = (&self.node(x)?.value, &self.node(row)?.value);
        if xv.rank() != 2 || rv.shape() != [xv.cols()] {
            return Err(Error::ShapeMismatch {
                op: "replace_rows",
                left: xv.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        check_indices("replace_rows", positions, xv.rows())?;
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for &p in positions {
            data[p * n..(p + 1) * n].copy_from_slice(rv.data());
        }
        let mut positions = positions.to_vec();
        positions.sort_unstable();
        positions.dedup();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x, row]);
        Ok(self.push(value, Op::ReplaceRows { x, row, positions }, needs))
    }

    /// Mean of the selected rows of `x[T×d]`, giving a vector of length `d`.
    pub fn mean_over_indices(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        if xv.rank() != 2 {
            return Err(Error::RankMismatch {
                op: "mean_over_indices",
                expected: 2,
                shape: xv.shape().to_vec(),
            });
        }
        if idx.is_empty() {
            return Err(Error::EmptyIndexSet);
        }
        check_indices("mean_over_indices", idx, xv.rows())?;
        let n = xv.cols();
        let mut out = vec![0.0; n];
        for &i in idx {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MeanOverIndices(x, idx.to_vec()), needs))
    }

    /// `||a − b||²` for same-shape inputs.
    pub fn sq_l2_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sq_l2_distance", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let d = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(d), Op::SqL2Distance(a, b), needs))
    }

    /// Shift-stable log-sum-exp of a vector.
    pub fn log_sum_exp(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        if xv.rank() != 1 || xv.is_empty() {
            return Err(Error::RankMismatch {
                op: "log_sum_exp",
                expected: 1,
                shape: xv.shape().to_vec(),
            });
        }
        let value = log_sum_exp(xv.data());
        let probs = softmax(xv.data());
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::LogSumExp { x, probs }, needs))
    }

    /// `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let lv = &self.node(logits)?.value;
        if lv.rank() != 1 {
            return Err(Error::RankMismatch {
                op: "cross_entropy",
                expected: 1,
                shape: lv.shape().to_vec(),
            });
        }
        check_indices("cross_entropy", &[target], lv.len())?;
        let value = log_sum_exp(lv.data()) - lv.data()[target];
        let probs = softmax(lv.data());
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            needs,
        ))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.node(x)?.value.data().iter().sum();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), needs))
    }

    /// Reverse sweep from a scalar `loss`; returns the gradient of every
    /// registered parameter (zeros where the loss does not depend on it).
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let lv = &self.node(loss)?.value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let value = &self.nodes[id.0].value;
            let data = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; value.len()]);
            out.insert(name.clone(), Tensor::new(value.shape().to_vec(), data)?);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let live = |id: NodeId| nodes[id.0].needs_grad;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].needs_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.rows(), av.cols());
                let n = if bv.rank() == 1 { 1 } else { bv.cols() };
                if live(*a) {
                    acc(*a, &mut |ga| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv.data()[p * n..(p + 1) * n];
                                ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if live(*b) {
                    acc(*b, &mut |gb| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a_ip = av.data()[i * k + p];
                                for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += a_ip * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    acc(*id, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                }
            }
            Op::AddMany(xs) => {
                for id in xs {
                    acc(*id, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                let n = nodes[b.0].value.len();
                acc(*b, &mut |gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += c * v));
            }
            Op::Shift(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            Op::Transpose(x) => {
                let (m, n) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(*x, &mut |gx| {
                    for ((gxr, yr), gr) in gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gain_v = nodes[gain.0].value.data();
                acc(*x, &mut |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gain_v[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        let nf = n as f64;
                        for j in 0..n {
                            let d = gr[j] * gain_v[j];
                            gx[r * n + j] += is / nf * (nf * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * gelu_grad(xv[j]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        if xv[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for id in xs {
                    let len = nodes[id.0].value.len();
                    acc(*id, &mut |gx| {
                        gx.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(o, v)| *o += v)
                    });
                    offset += len;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut offset = 0;
                for id in xs {
                    let cols = nodes[id.0].value.cols();
                    acc(*id, &mut |gx| {
                        for (r, gxr) in gx.chunks_mut(cols).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + cols];
                            gxr.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                        }
                    });
                    offset += cols;
                }
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let cols = nodes[x.0].value.cols();
                acc(*x, &mut |gx| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        let dst = &mut gx[r * cols + start..r * cols + start + len];
                        dst.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::GatherRows(table, idx) => {
                let n = nodes[table.0].value.cols();
                acc(*table, &mut |gt| {
                    for (k, &i) in idx.iter().enumerate() {
                        let dst = &mut gt[i * n..(i + 1) * n];
                        dst.iter_mut().zip(&g[k * n..(k + 1) * n]).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::ReplaceRows { x, row, positions } => {
                let n = node.value.cols();
                acc(*x, &mut |gx| {
                    for (r, (gxr, gr)) in gx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        if positions.binary_search(&r).is_err() {
                            gxr.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                        }
                    }
                });
                acc(*row, &mut |grow| {
                    for &p in positions {
                        grow.iter_mut()
                            .zip(&g[p * n..(p + 1) * n])
                            .for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::MeanOverIndices(x, idx) => {
                let n = node.value.len();
                let inv = 1.0 / idx.len() as f64;
                acc(*x, &mut |gx| {
                    for &i in idx {
                        gx[i * n..(i + 1) * n]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(o, v)| *o += inv * v);
                    }
                });
            }
            Op::SqL2Distance(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let s = 2.0 * g[0];
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += s * (av[j] - bv[j]);
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] -= s * (av[j] - bv[j]);
                    }
                });
            }
            Op::LogSumExp { x, probs } => {
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(probs).for_each(|(o, p)| *o += g[0] * p)
                });
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                acc(*logits, &mut |gl| {
                    for (j, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *o += g[0] * (p - onehot);
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
        }
    }
}

/// Gradient of a scalar `loss` with respect to every registered parameter.
pub fn grad_of(loss: NodeId, graph: &Graph) -> Result<BTreeMap<String, Tensor>> {
    graph.backward(loss)
}

trait MatmulShape {
    fn rows_for_matmul(&self) -> usize;
}

impl MatmulShape for Tensor {
    fn rows_for_matmul(&self) -> usize {
        match self.rank() {
            1 => self.len(),
            _ => self.rows(),
        }
    }
}
