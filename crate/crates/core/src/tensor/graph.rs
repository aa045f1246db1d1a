//! Dynamically recorded computation graph with reverse-mode gradients.
//!
//! Each operation evaluates eagerly and appends a node; [`Graph::backward`]
//! walks the node list in reverse. Parameters are referenced from a
//! [`ParamStore`] without copying, so the graph borrows the store for its
//! whole lifetime. A graph is confined to the thread that built it.

use std::collections::HashMap;

use super::kernels::{self, gelu_grad, gemm, layer_norm_rows_raw, softmax_rows_into};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    Gelu(NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SelectRows { x: NodeId, rows: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    SumAll(NodeId),
    CapsuleMean { votes: NodeId, credits: NodeId, d_out: usize, sums: Vec<f64> },
    CapsuleAgreement { votes: NodeId, outputs: NodeId, d_out: usize, scale: f64 },
}

#[derive(Debug)]
enum Stored {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    value: Stored,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// A graph without a parameter store; inputs are supplied as leaves.
    pub fn new() -> Self {
        Self { params: None, nodes: Vec::new(), param_nodes: HashMap::new() }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Self { params: Some(params), nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Stored::Owned(t) => t,
            Stored::Param(pid) => self.params.expect("parameter node without a store").value(*pid),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value: Stored::Owned(value), op, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    fn matrix(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let v = self.value(id);
        if v.shape().len() != 2 {
            return Err(Error::dim(format!("{what} expects a matrix, got {:?}", v.shape())));
        }
        Ok((v.rows(), v.cols()))
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { value: Stored::Owned(value), op: Op::Leaf, needs_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { value: Stored::Owned(value), op: Op::Leaf, needs_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Node bound to a stored parameter. Repeated calls return the same node.
    ///
    /// Panics if the graph was created without a parameter store.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        assert!(self.params.is_some(), "graph has no parameter store");
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node { value: Stored::Param(id), op: Op::Param, needs_grad: true });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.matrix(a, "add_row")?;
        let vr = self.value(row);
        if vr.len() != n {
            return Err(Error::dim(format!("add_row: row of {} for {n} columns", vr.len())));
        }
        let mut data = self.value(a).data().to_vec();
        for r in 0..m {
            for (x, b) in data[r * n..(r + 1) * n].iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        let ng = self.needs(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng, "add_row")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!("mul: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.matrix(a, "mul_row")?;
        let vr = self.value(row);
        if vr.len() != n {
            return Err(Error::dim(format!("mul_row: row of {} for {n} columns", vr.len())));
        }
        let mut data = self.value(a).data().to_vec();
        for r in 0..m {
            for (x, g) in data[r * n..(r + 1) * n].iter_mut().zip(vr.data()) {
                *x *= g;
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        let ng = self.needs(&[a, row]);
        self.push(out, Op::MulRow(a, row), ng, "mul_row")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), ng, "scale")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.matrix(a, "transpose")?;
        let out = self.value(a).transpose();
        let ng = self.needs(&[a]);
        self.push(out, Op::Transpose(a), ng, "transpose")
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where row `r` only sees columns `0..=r`.
    pub fn softmax_rows_causal(&mut self, x: NodeId) -> Result<NodeId> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: NodeId, causal: bool) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "softmax_rows")?;
        let mut out = vec![0.0; m * n];
        softmax_rows_into(self.value(x).data(), m, n, causal, &mut out);
        let ng = self.needs(&[x]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::Softmax { x }, ng, "softmax")
    }

    /// Row-wise normalization to zero mean, unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "layer_norm_rows")?;
        let (out, inv_std) = layer_norm_rows_raw(self.value(x).data(), m, n);
        let ng = self.needs(&[x]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::LayerNorm { x, inv_std }, ng, "layer_norm")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let out = Tensor::from_parts(vx.shape().to_vec(), vx.data().iter().map(|&v| kernels::gelu(v)).collect());
        let ng = self.needs(&[x]);
        self.push(out, Op::Gelu(x), ng, "gelu")
    }

    /// Rows `ids` of an embedding table.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.matrix(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("row {bad} not in table of {v}")));
        }
        let vt = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(vt.row(i));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        let ng = self.needs(&[table]);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, ng, "gather_rows")
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim(format!("slice_cols {start}..{} of {n}", start + len)));
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let ng = self.needs(&[x]);
        self.push(Tensor::from_parts(vec![m, len], data), Op::SliceCols { x, start }, ng, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols of nothing".into()));
        }
        let m = self.matrix(parts[0], "concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.matrix(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dim(format!("concat_cols: {pm} rows vs {m}")));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = self.needs(parts);
        self.push(Tensor::from_parts(vec![m, total], data), Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    /// Rows of `x` in the given order; indices may repeat.
    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "select_rows")?;
        if rows.is_empty() {
            return Err(Error::Empty("select_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Index(format!("row {bad} not in matrix of {m}")));
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(vx.row(r));
        }
        let ng = self.needs(&[x]);
        self.push(
            Tensor::from_parts(vec![rows.len(), n], data),
            Op::SelectRows { x, rows: rows.to_vec() },
            ng,
            "select_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows of nothing".into()));
        }
        let n = self.matrix(parts[0], "concat_rows")?.1;
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.matrix(p, "concat_rows")?;
            if pn != n {
                return Err(Error::dim(format!("concat_rows: {pn} columns vs {n}")));
            }
            m += pm;
        }
        let mut data = Vec::with_capacity(m * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = self.needs(parts);
        self.push(Tensor::from_parts(vec![m, n], data), Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs(&[x]);
        self.push(out, Op::Reshape(x), ng, "reshape")
    }

    /// Mean cross-entropy of row-wise logits against class indices; `[1×1]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        let (b, k) = kernels::check_ce(vl, targets)?;
        let mut probs = vec![0.0; b * k];
        softmax_rows_into(vl.data(), b, k, false, &mut probs);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = vl.row(r);
            total += kernels::log_sum_exp(row) - row[t];
        }
        let ng = self.needs(&[logits]);
        self.push(
            Tensor::scalar(total / b as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
            "cross_entropy",
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng, "sum_all")
    }

    /// Credit-weighted mean of votes per output capsule.
    ///
    /// `votes` is `m × (n_out·d_out)` with output capsule `j` occupying columns
    /// `j·d_out..(j+1)·d_out`; `credits` is `m × n_out`. Returns
    /// `n_out × d_out` with row `j = Σ_i c_ij v_ij / Σ_i c_ij`.
    pub fn capsule_mean(&mut self, votes: NodeId, credits: NodeId, d_out: usize) -> Result<NodeId> {
        let (m, nc) = self.matrix(credits, "capsule_mean")?;
        let (mv, w) = self.matrix(votes, "capsule_mean")?;
        if mv != m || w != nc * d_out {
            return Err(Error::dim(format!("capsule_mean: votes {mv}x{w} vs credits {m}x{nc} with d_out {d_out}")));
        }
        let (vv, vc) = (self.value(votes).data(), self.value(credits).data());
        let mut sums = vec![0.0; nc];
        let mut out = vec![0.0; nc * d_out];
        for i in 0..m {
            for j in 0..nc {
                let c = vc[i * nc + j];
                sums[j] += c;
                let v = &vv[i * w + j * d_out..i * w + (j + 1) * d_out];
                for (o, x) in out[j * d_out..(j + 1) * d_out].iter_mut().zip(v) {
                    *o += c * x;
                }
            }
        }
        for j in 0..nc {
            if sums[j] <= 0.0 {
                return Err(Error::NonFinite("capsule_mean (zero credit mass)"));
            }
            out[j * d_out..(j + 1) * d_out].iter_mut().for_each(|o| *o /= sums[j]);
        }
        let ng = self.needs(&[votes, credits]);
        self.push(
            Tensor::from_parts(vec![nc, d_out], out),
            Op::CapsuleMean { votes, credits, d_out, sums },
            ng,
            "capsule_mean",
        )
    }

    /// Scaled agreement `scale·⟨v_ij, out_j⟩` between every vote and its
    /// output capsule; returns `m × n_out`.
    pub fn capsule_agreement(&mut self, votes: NodeId, outputs: NodeId, scale: f64) -> Result<NodeId> {
        let (nc, d_out) = self.matrix(outputs, "capsule_agreement")?;
        let (m, w) = self.matrix(votes, "capsule_agreement")?;
        if w != nc * d_out {
            return Err(Error::dim(format!("capsule_agreement: votes width {w} vs {nc} capsules of {d_out}")));
        }
        let (vv, vo) = (self.value(votes).data(), self.value(outputs).data());
        let mut out = vec![0.0; m * nc];
        for i in 0..m {
            for j in 0..nc {
                let v = &vv[i * w + j * d_out..i * w + (j + 1) * d_out];
                let o = &vo[j * d_out..(j + 1) * d_out];
                out[i * nc + j] = scale * v.iter().zip(o).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let ng = self.needs(&[votes, outputs]);
        self.push(
            Tensor::from_parts(vec![m, nc], out),
            Op::CapsuleAgreement { votes, outputs, d_out, scale },
            ng,
            "capsule_agreement",
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse pass seeded with `seed` instead of 1.
    pub fn backward_scaled(&self, loss: NodeId, seed: f64) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), seed));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = self.value(NodeId(idx));
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), (n as isize, 1), vb.data(), (1, n as isize), 0.0, &mut da);
                    self.acc(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, va.data(), (1, k as isize), g.data(), (n as isize, 1), 0.0, &mut db);
                    self.acc(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.nodes[row.0].needs_grad {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (d, x) in db.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.acc(grads, *row, Tensor::from_parts(shape, db));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.nodes[b.0].needs_grad {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (self.value(*a), self.value(*row));
                let n = g.cols();
                if self.nodes[a.0].needs_grad {
                    let mut d = g.data().to_vec();
                    for r in 0..g.rows() {
                        for (x, s) in d[r * n..(r + 1) * n].iter_mut().zip(vr.data()) {
                            *x *= s;
                        }
                    }
                    self.acc(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.nodes[row.0].needs_grad {
                    let mut dr = vec![0.0; n];
                    for r in 0..g.rows() {
                        for ((d, x), y) in dr.iter_mut().zip(g.row(r)).zip(va.row(r)) {
                            *d += x * y;
                        }
                    }
                    self.acc(grads, *row, Tensor::from_parts(vr.shape().to_vec(), dr));
                }
            }
            Op::Scale(a, c) => {
                let mut d = g.clone();
                d.scale_in_place(*c);
                self.acc(grads, *a, d);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Softmax { x } => {
                let n = out.cols();
                let mut d = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        d[r * n + c] = y[c] * (gy[c] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::LayerNorm { x, inv_std } => {
                let n = out.cols();
                let mut d = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let mean_g = gy.iter().sum::<f64>() / n as f64;
                    let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        d[r * n + c] = inv_std[r] * (gy[c] - mean_g - y[c] * mean_gy);
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = g.data().iter().zip(vx.data()).map(|(a, &v)| a * gelu_grad(v)).collect();
                self.acc(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let mut d = Tensor::zeros(vt.shape());
                for (r, &i) in ids.iter().enumerate() {
                    for (a, b) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                self.acc(grads, *table, d);
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let len = g.cols();
                let mut d = Tensor::zeros(vx.shape());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                self.acc(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.cols();
                    if self.nodes[p.0].needs_grad {
                        let mut d = Vec::with_capacity(vp.len());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.acc(grads, p, Tensor::from_parts(vp.shape().to_vec(), d));
                    }
                    offset += w;
                }
            }
            Op::SelectRows { x, rows } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (k, &r) in rows.iter().enumerate() {
                    for (a, b) in d.row_mut(r).iter_mut().zip(g.row(k)) {
                        *a += b;
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let m = vp.rows();
                    if self.nodes[p.0].needs_grad {
                        let d = g.data()[offset * n..(offset + m) * n].to_vec();
                        self.acc(grads, p, Tensor::from_parts(vp.shape().to_vec(), d));
                    }
                    offset += m;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let b = targets.len();
                let k = probs.len() / b;
                let s = g.data()[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * k + t] -= s;
                }
                self.acc(grads, *logits, Tensor::from_parts(vec![b, k], d));
            }
            Op::SumAll(x) => {
                let shape = self.value(*x).shape();
                self.acc(grads, *x, Tensor::filled(shape, g.data()[0]));
            }
            Op::CapsuleMean { votes, credits, d_out, sums } => {
                let d_out = *d_out;
                let (vv, vc) = (self.value(*votes), self.value(*credits));
                let (m, nc) = (vc.rows(), vc.cols());
                let w = vv.cols();
                if self.nodes[votes.0].needs_grad {
                    let mut dv = vec![0.0; vv.len()];
                    for i in 0..m {
                        for j in 0..nc {
                            let s = vc.data()[i * nc + j] / sums[j];
                            let gj = &g.data()[j * d_out..(j + 1) * d_out];
                            for (d, x) in dv[i * w + j * d_out..i * w + (j + 1) * d_out].iter_mut().zip(gj) {
                                *d = s * x;
                            }
                        }
                    }
                    self.acc(grads, *votes, Tensor::from_parts(vv.shape().to_vec(), dv));
                }
                if self.nodes[credits.0].needs_grad {
                    // d out_j / d c_ij = (v_ij - out_j) / S_j
                    let go: Vec<f64> = (0..nc)
                        .map(|j| {
                            let r = j * d_out..(j + 1) * d_out;
                            g.data()[r.clone()].iter().zip(&out.data()[r]).map(|(a, b)| a * b).sum()
                        })
                        .collect();
                    let mut dc = vec![0.0; m * nc];
                    for i in 0..m {
                        for j in 0..nc {
                            let v = &vv.data()[i * w + j * d_out..i * w + (j + 1) * d_out];
                            let gj = &g.data()[j * d_out..(j + 1) * d_out];
                            let gv: f64 = gj.iter().zip(v).map(|(a, b)| a * b).sum();
                            dc[i * nc + j] = (gv - go[j]) / sums[j];
                        }
                    }
                    self.acc(grads, *credits, Tensor::from_parts(vec![m, nc], dc));
                }
            }
            Op::CapsuleAgreement { votes, outputs, d_out, scale } => {
                let d_out = *d_out;
                let (vv, vo) = (self.value(*votes), self.value(*outputs));
                let (m, w) = (vv.rows(), vv.cols());
                let nc = vo.rows();
                if self.nodes[votes.0].needs_grad {
                    let mut dv = vec![0.0; vv.len()];
                    for i in 0..m {
                        for j in 0..nc {
                            let s = scale * g.data()[i * nc + j];
                            let o = &vo.data()[j * d_out..(j + 1) * d_out];
                            for (d, x) in dv[i * w + j * d_out..i * w + (j + 1) * d_out].iter_mut().zip(o) {
                                *d = s * x;
                            }
                        }
                    }
                    self.acc(grads, *votes, Tensor::from_parts(vv.shape().to_vec(), dv));
                }
                if self.nodes[outputs.0].needs_grad {
                    let mut d = vec![0.0; vo.len()];
                    for i in 0..m {
                        for j in 0..nc {
                            let s = scale * g.data()[i * nc + j];
                            let v = &vv.data()[i * w + j * d_out..i * w + (j + 1) * d_out];
                            for (a, x) in d[j * d_out..(j + 1) * d_out].iter_mut().zip(v) {
                                *a += s * x;
                            }
                        }
                    }
                    self.acc(grads, *outputs, Tensor::from_parts(vo.shape().to_vec(), d));
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn param_of(&self, id: NodeId) -> Option<ParamId> {
        match self.nodes[id.0].value {
            Stored::Param(p) => Some(p),
            Stored::Owned(_) => None,
        }
    }
}

/// Gradients of one reverse pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter node the pass reached.
    pub fn into_param_grads(self, graph: &Graph<'_>) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> =
            self.grads.into_iter().enumerate().filter_map(|(i, g)| Some((graph.param_of(NodeId(i))?, g?))).collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}
