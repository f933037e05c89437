//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so every input of a node has a
//! smaller index than the node itself and a single reverse sweep over the
//! tape visits nodes in a valid topological order.

use super::distribution::LOG_CLAMP;
use super::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Elementwise, or `rhs` a vector broadcast over the rows of `lhs`.
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Normalized input followed by one inverse std per row.
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Cosine(NodeId, NodeId),
    CrossEntropy {
        pred: NodeId,
        target: Vec<f64>,
    },
    Sum(NodeId),
    MeanRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Select {
        x: NodeId,
        index: usize,
    },
    Reshape(NodeId),
    /// A value computed outside the graph; it has no vector-Jacobian product.
    Opaque {
        name: String,
        inputs: Vec<NodeId>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records tensor operations for one forward evaluation.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

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

    /// Adds a tensor; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Adds a tensor that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn mat_dims(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "{what} expects a matrix, got {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.mat_dims(a, "matmul lhs")?;
        let (k2, n) = self.mat_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul [{m},{k}] x [{k2},{n}]"
            )));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.mat_dims(a, "transpose")?;
        let out = Tensor::new(vec![n, m], transpose_raw(self.value(a).data(), m, n))?;
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::Transpose(a), g))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.shape() == vb.shape() {
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x + y)
                .collect()
        } else if vb.rank() == 1 && va.rank() == 2 && va.shape()[1] == vb.shape()[0] {
            let n = vb.shape()[0];
            va.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + vb.data()[i % n])
                .collect()
        } else {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        };
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul {:?} * {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x * factor).collect(),
        )?;
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::Scale(a, factor), g))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::Gelu(a), g))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (rows, cols) = va.rows_cols();
        let mut data = va.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax(a), g))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, cols) = vx.rows_cols();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [cols] || vb.shape() != [cols] {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm over {cols} features with gamma {:?}, beta {:?}",
                vg.shape(),
                vb.shape()
            )));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                data[r * cols + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// Rows of a matrix, or elements of a vector, at `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if ids.is_empty() {
            return Err(Error::InvalidInput("gather with no indices".into()));
        }
        let (rows, cols, shape) = match vt.shape() {
            [n] => (*n, 1, vec![ids.len()]),
            [n, c] => (*n, *c, vec![ids.len(), *c]),
            s => return Err(Error::ShapeMismatch(format!("gather from {s:?}"))),
        };
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::InvalidInput(format!(
                    "gather index {i} out of range {rows}"
                )));
            }
            data.extend_from_slice(&vt.data()[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::new(shape, data)?;
        let g = self.any_grad(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    /// Cosine similarity of each row of `a` (`[n, d]` or `[d]`) with the vector `b`.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, d) = va.rows_cols();
        if vb.numel() != d {
            return Err(Error::ShapeMismatch(format!(
                "cosine of rows {:?} with {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let nb = vb.l2_norm();
        let data = (0..n)
            .map(|i| {
                let row = &va.data()[i * d..(i + 1) * d];
                let na = super::dot(row, row).sqrt();
                super::dot(row, vb.data()) / (na * nb)
            })
            .collect::<Vec<_>>();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cosine similarity of a zero vector".into()));
        }
        let out = Tensor::vector(data);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Cosine(a, b), g))
    }

    /// `-sum_i target_i * ln(max(pred_i, LOG_CLAMP))` as a scalar node.
    pub fn cross_entropy(&mut self, pred: NodeId, target: &[f64]) -> Result<NodeId> {
        let vp = self.value(pred);
        if vp.numel() != target.len() {
            return Err(Error::ShapeMismatch(format!(
                "cross-entropy between {} predictions and {} targets",
                vp.numel(),
                target.len()
            )));
        }
        let value = super::distribution::cross_entropy_raw(vp.data(), target);
        let g = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                pred,
                target: target.to_vec(),
            },
            g,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).data().iter().sum();
        let g = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(a), g))
    }

    /// Mean over the rows of a matrix, giving a vector.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.mat_dims(a, "mean_rows")?;
        let va = self.value(a);
        let mut data = vec![0.0; n];
        for r in 0..m {
            for (d, v) in data.iter_mut().zip(&va.data()[r * n..(r + 1) * n]) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let g = self.any_grad(&[a]);
        Ok(self.push(Tensor::vector(data), Op::MeanRows(a), g))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat of nothing".into()));
        }
        let (_, cols) = self.mat_dims(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, n) = self.mat_dims(p, "concat_rows")?;
            if n != cols {
                return Err(Error::ShapeMismatch(format!(
                    "concat_rows with {n} vs {cols} columns"
                )));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let g = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat of nothing".into()));
        }
        let (rows, _) = self.mat_dims(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m, n) = self.mat_dims(p, "concat_cols")?;
            if m != rows {
                return Err(Error::ShapeMismatch(format!(
                    "concat_cols with {m} vs {rows} rows"
                )));
            }
            widths.push(n);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let g = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.mat_dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols {start}..{} of {n}",
                start + len
            )));
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&vx.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, g))
    }

    /// Sub-tensor at `index` along the first axis.
    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() < 2 || index >= vx.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "select {index} from {:?}",
                vx.shape()
            )));
        }
        let inner: usize = vx.shape()[1..].iter().product();
        let out = Tensor::new(
            vx.shape()[1..].to_vec(),
            vx.data()[index * inner..(index + 1) * inner].to_vec(),
        )?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Select { x, index }, g))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = Tensor::new(shape, self.value(x).data().to_vec())?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), g))
    }

    /// Records a value computed outside the graph from `inputs`. Backward
    /// fails if a gradient has to flow through it.
    pub fn opaque(&mut self, name: &str, inputs: &[NodeId], value: Tensor) -> NodeId {
        let g = self.any_grad(inputs);
        self.push(
            value,
            Op::Opaque {
                name: name.to_string(),
                inputs: inputs.to_vec(),
            },
            g,
        )
    }

    /// Reverse sweep from the scalar `loss`; returns one gradient per entry of
    /// `leaves`, zero-filled for leaves the loss does not depend on.
    pub fn backward(&self, loss: NodeId, leaves: &[NodeId]) -> Result<Vec<Tensor>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(upstream);
                continue;
            }
            self.propagate(node, &upstream, &mut grads)?;
        }

        Ok(leaves
            .iter()
            .map(|&id| {
                let shape = self.value(id).shape().to_vec();
                let data = grads
                    .get(id.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; self.value(id).numel()]);
                Tensor::new(shape, data).expect("gradient shape matches its leaf")
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.nodes[a.0].needs_grad {
                    let bt = transpose_raw(vb.data(), k, n);
                    self.accumulate(grads, *a, matmul_raw(up, &bt, m, n, k));
                }
                if self.nodes[b.0].needs_grad {
                    let at = transpose_raw(va.data(), m, k);
                    self.accumulate(grads, *b, matmul_raw(&at, up, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                self.accumulate(grads, *a, transpose_raw(up, m, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.to_vec());
                let vb = self.value(*b);
                if vb.shape() == out.shape() {
                    self.accumulate(grads, *b, up.to_vec());
                } else {
                    let n = vb.numel();
                    let mut db = vec![0.0; n];
                    for (i, g) in up.iter().enumerate() {
                        db[i % n] += g;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = up.iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                let db = up.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, up.iter().map(|g| g * f).collect());
            }
            Op::Gelu(a) => {
                let da = up
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| {
                        let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Softmax(a) => {
                let (rows, cols) = out.rows_cols();
                let y = out.data();
                let mut da = vec![0.0; y.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let dotp: f64 = up[s.clone()]
                        .iter()
                        .zip(&y[s.clone()])
                        .map(|(g, p)| g * p)
                        .sum();
                    for c in s {
                        da[c] = y[c] * (up[c] - dotp);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = out.rows_cols();
                let vg = self.value(*gamma).data();
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let s = r * cols;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        let g = up[s + c];
                        dgamma[c] += g * xhat[s + c];
                        dbeta[c] += g;
                        let dh = g * vg[c];
                        mean_d += dh;
                        mean_dx += dh * xhat[s + c];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for c in 0..cols {
                        let dh = up[s + c] * vg[c];
                        dx[s + c] = inv_std[r] * (dh - mean_d - xhat[s + c] * mean_dx);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let (_, cols) = if vt.rank() == 1 {
                    (vt.numel(), 1)
                } else {
                    vt.rows_cols()
                };
                let mut dt = vec![0.0; vt.numel()];
                for (k, &i) in ids.iter().enumerate() {
                    for c in 0..cols {
                        dt[i * cols + c] += up[k * cols + c];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, d) = va.rows_cols();
                let bd = vb.data();
                let nb = vb.l2_norm();
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; d];
                for i in 0..n {
                    let row = &va.data()[i * d..(i + 1) * d];
                    let na = super::dot(row, row).sqrt();
                    let c = out.data()[i];
                    let g = up[i];
                    for j in 0..d {
                        da[i * d + j] = g * (bd[j] / (na * nb) - c * row[j] / (na * na));
                        db[j] += g * (row[j] / (na * nb) - c * bd[j] / (nb * nb));
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::CrossEntropy { pred, target } => {
                let g = up[0];
                let dp = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if t == 0.0 || p <= LOG_CLAMP {
                            0.0
                        } else {
                            -g * t / p
                        }
                    })
                    .collect();
                self.accumulate(grads, *pred, dp);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![up[0]; n]);
            }
            Op::MeanRows(a) => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut da = Vec::with_capacity(m * n);
                for _ in 0..m {
                    da.extend(up.iter().map(|g| g / m as f64));
                }
                self.accumulate(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, up[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = (out.shape()[0], out.shape()[1]);
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&up[r * cols + start..r * cols + start + w]);
                    }
                    self.accumulate(grads, p, dp);
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let (m, n) = (vx.shape()[0], vx.shape()[1]);
                let len = out.shape()[1];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len]
                        .copy_from_slice(&up[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Select { x, index } => {
                let vx = self.value(*x);
                let inner = out.numel();
                let mut dx = vec![0.0; vx.numel()];
                dx[index * inner..(index + 1) * inner].copy_from_slice(up);
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, up.to_vec()),
            Op::Opaque { name, inputs } => {
                return Err(Error::UnsupportedOp(format!(
                    "`{name}` (from {} inputs) has no gradient rule but lies between a leaf and the loss",
                    inputs.len()
                )));
            }
        }
        Ok(())
    }
}
