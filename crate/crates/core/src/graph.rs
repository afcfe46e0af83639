//! Reverse-mode automatic differentiation over an eager op tape.
//!
//! Ops execute immediately and append a record (kind, input ids, cached
//! activation) to the tape. `backward` walks the tape in reverse, accumulating
//! gradients into every node that transitively depends on a trainable
//! parameter. Nodes that do not need gradients are skipped, so constant
//! inputs (data batches) never pay for an input-gradient pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { stride: usize },
    Linear,
    MaxPool2d { arg: Vec<u32> },
    Act(Activation),
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(f32),
    Exp,
    Log,
    Sqrt,
    Square,
    Softplus,
    Sum,
    Mean,
    CrossEntropy { labels: Vec<u32> },
    Reshape,
    SliceRows { start: usize },
    ConcatRows,
    SliceCols { start: usize },
    ConcatCols,
    LayerNorm { eps: f32 },
    SoftmaxRows,
    MatMul { transpose_b: bool },
    RowNormalize,
    NtXent { temp: f32 },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { op, inputs, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, needs_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable parameter; registered for gradient accumulation.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, needs_grad: true });
        let id = NodeId(self.nodes.len() - 1);
        self.params.push(id);
        id
    }

    // ── Network ops ──────────────────────────────────────────────────────

    /// Valid cross-correlation of NCHW input with (CO, CI, KH, KW) weights.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        let (n, ci, h, iw) = self.value(x).dims4()?;
        let wd = self.value(w).dims();
        let [co, wci, kh, kw] = *wd else {
            return Err(Error::Shape(format!("conv2d weight must be rank 4, got {:?}", wd)));
        };
        if wci != ci {
            return Err(Error::Shape(format!("conv2d channels: input {ci}, weight {wci}")));
        }
        if kh > h || kw > iw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than input {h}x{iw}"
            )));
        }
        if let Some(b) = b {
            let bd = self.value(b).dims();
            if bd != [co] {
                return Err(Error::Shape(format!("conv2d bias dims {:?}, expected [{co}]", bd)));
            }
        }
        let oh = (h - kh) / stride + 1;
        let ow = (iw - kw) / stride + 1;
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = kernels::conv2d_fwd(
            self.value(x).data(),
            (n, ci, h, iw),
            self.value(w).data(),
            (co, kh, kw),
            bias.as_deref(),
            stride,
        );
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        Ok(self.push(Op::Conv2d { stride }, inputs, value))
    }

    /// `y = x W^T + b` with x (N, FI), w (FO, FI).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, fi) = self.value(x).dims2()?;
        let (fo, wfi) = self.value(w).dims2()?;
        if wfi != fi {
            return Err(Error::Shape(format!("linear features: input {fi}, weight {wfi}")));
        }
        if let Some(b) = b {
            let bd = self.value(b).dims();
            if bd != [fo] {
                return Err(Error::Shape(format!("linear bias dims {:?}, expected [{fo}]", bd)));
            }
        }
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = kernels::linear_fwd(self.value(x).data(), (n, fi), self.value(w).data(), fo, bias.as_deref());
        let value = Tensor::new(vec![n, fo], out)?;
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        Ok(self.push(Op::Linear, inputs, value))
    }

    /// Non-overlapping max pooling; remainder rows and columns are dropped.
    pub fn maxpool2d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if window < 2 || h < window || w < window {
            return Err(Error::Shape(format!(
                "maxpool window {window} on {h}x{w} input"
            )));
        }
        let (out, arg) = kernels::maxpool_fwd(self.value(x).data(), (n, c, h, w), window);
        let value = Tensor::new(vec![n, c, h / window, w / window], out)?;
        Ok(self.push(Op::MaxPool2d { arg }, vec![x], value))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| apply_act(kind, v)).collect();
        let value = Tensor::new(self.value(x).dims().to_vec(), data).expect("same shape");
        self.push(Op::Act(kind), vec![x], value)
    }

    // ── Elementwise ops ──────────────────────────────────────────────────

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f32, f32) -> f32) -> Result<NodeId> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::Shape(format!(
                "elementwise op on dims {:?} vs {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.value(a).dims().to_vec(), data)?;
        Ok(self.push(op, vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    fn unary(&mut self, op: Op, x: NodeId, f: impl Fn(f32) -> f32) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.value(x).dims().to_vec(), data).expect("same shape");
        self.push(op, vec![x], value)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        self.unary(Op::AddScalar, x, |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        self.unary(Op::MulScalar(c), x, |v| v * c)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Exp, x, |v| v.exp())
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Log, x, |v| v.ln())
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sqrt, x, |v| v.sqrt())
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Square, x, |v| v * v)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Softplus, x, |v| kernels::softplus(v as f64) as f32)
    }

    // ── Reductions and losses ────────────────────────────────────────────

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = 0.0f64;
        for &v in self.value(x).data() {
            acc += v as f64;
        }
        self.push(Op::Sum, vec![x], Tensor::scalar(acc as f32))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel().max(1);
        let mut acc = 0.0f64;
        for &v in self.value(x).data() {
            acc += v as f64;
        }
        self.push(Op::Mean, vec![x], Tensor::scalar((acc / n as f64) as f32))
    }

    /// Softmax cross entropy against integer labels, meaned over the batch.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[u32]) -> Result<NodeId> {
        let (n, c) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::Shape(format!("{n} logit rows, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let mut acc = 0.0f64;
        for (row, &label) in self.value(logits).data().chunks_exact(c).zip(labels) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let mut lse = 0.0f64;
            for &v in row {
                lse += (v as f64 - max).exp();
            }
            acc += max + lse.ln() - row[label as usize] as f64;
        }
        let value = Tensor::scalar((acc / n as f64) as f32);
        Ok(self.push(Op::CrossEntropy { labels: labels.to_vec() }, vec![logits], value))
    }

    // ── Structural ops ───────────────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, dims: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).reshape(dims)?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > r {
            return Err(Error::Shape(format!("slice rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        Ok(self.push(Op::SliceRows { start }, vec![x], value))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some((&first, rest)) = parts.split_first() else {
            return Err(Error::Shape("concat of zero tensors".into()));
        };
        let (mut rows, cols) = self.value(first).dims2()?;
        for &p in rest {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::Shape(format!("concat rows: {cols} vs {c} columns")));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatRows, parts.to_vec(), value))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(Error::Shape(format!("slice cols {start}..{} of {c}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(Op::SliceCols { start }, vec![x], value))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat of zero tensors".into()));
        };
        let (rows, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::Shape(format!("concat cols: {rows} vs {r} rows")));
            }
            widths.push(c);
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatCols, parts.to_vec(), value))
    }

    // ── Attention building blocks ────────────────────────────────────────

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f32) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gamma).dims() != [c] || self.value(beta).dims() != [c] {
            return Err(Error::Shape(format!(
                "layer_norm scale dims {:?}/{:?}, expected [{c}]",
                self.value(gamma).dims(),
                self.value(beta).dims()
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &src[i * c..][..c];
            let (mean, var) = row_moments(row);
            let inv = 1.0 / (var + eps as f64).sqrt();
            let orow = &mut data[i * c..][..c];
            for j in 0..c {
                orow[j] = (((row[j] as f64 - mean) * inv) * g[j] as f64 + b[j] as f64) as f32;
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], value))
    }

    /// Softmax along the last dimension of a matrix.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &src[i * c..][..c];
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let mut z = 0.0f64;
            let orow = &mut data[i * c..][..c];
            for j in 0..c {
                let e = (row[j] as f64 - max).exp();
                orow[j] = e as f32;
                z += e;
            }
            for v in orow.iter_mut() {
                *v = (*v as f64 / z) as f32;
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(Op::SoftmaxRows, vec![x], value))
    }

    /// `a b` or `a b^T` for rank 2 inputs.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (inner, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if inner != k {
            return Err(Error::Shape(format!(
                "matmul ({m}x{k}) with ({br}x{bc}), transpose_b={transpose_b}"
            )));
        }
        let data = if transpose_b {
            kernels::matmul_nt(self.value(a).data(), (m, k), self.value(b).data(), n)
        } else {
            kernels::matmul_nn(self.value(a).data(), (m, k), self.value(b).data(), n)
        };
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::MatMul { transpose_b }, vec![a, b], value))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &src[i * c..][..c];
            let mut sq = 0.0f64;
            for &v in row {
                sq += v as f64 * v as f64;
            }
            let inv = 1.0 / (sq.sqrt() + 1e-12);
            for j in 0..c {
                data[i * c + j] = (row[j] as f64 * inv) as f32;
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(Op::RowNormalize, vec![x], value))
    }

    /// Normalized-temperature cross entropy over a similarity matrix of 2M
    /// views where rows 2i and 2i+1 are positive pairs. Sums the loss over
    /// all 2M anchors; each anchor's denominator runs over every other view.
    pub fn nt_xent(&mut self, sim: NodeId, temp: f32) -> Result<NodeId> {
        let (r, c) = self.value(sim).dims2()?;
        if r != c || r < 2 || r % 2 != 0 {
            return Err(Error::Shape(format!("nt_xent needs an even square matrix, got {r}x{c}")));
        }
        if temp <= 0.0 {
            return Err(Error::Config("nt_xent temperature must be positive".into()));
        }
        let s = self.value(sim).data();
        let t = temp as f64;
        let mut total = 0.0f64;
        for i in 0..r {
            let row = &s[i * c..][..c];
            let partner = i ^ 1;
            let mut max = f64::NEG_INFINITY;
            for (k, &v) in row.iter().enumerate() {
                if k != i {
                    max = max.max(v as f64 / t);
                }
            }
            let mut z = 0.0f64;
            for (k, &v) in row.iter().enumerate() {
                if k != i {
                    z += (v as f64 / t - max).exp();
                }
            }
            total += max + z.ln() - row[partner] as f64 / t;
        }
        let value = Tensor::scalar(total as f32);
        Ok(self.push(Op::NtXent { temp }, vec![sim], value))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Accumulates gradients of a scalar loss into every contributing node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar node with dims {:?}",
                self.value(loss).dims()
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Compute("loss does not depend on any parameter".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(contrib.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        let needs = |i: usize| self.nodes[ins[i].0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { stride } => {
                let x = self.value(ins[0]);
                let w = self.value(ins[1]);
                let (n, ci, h, iw) = x.dims4()?;
                let [co, _, kh, kw] = *w.dims() else { unreachable!() };
                if needs(0) {
                    let dx = kernels::conv2d_bwd_x(g.data(), (n, ci, h, iw), w.data(), (co, kh, kw), *stride);
                    self.accumulate(grads, ins[0], Tensor::new(x.dims().to_vec(), dx)?);
                }
                let with_bias = ins.len() == 3;
                if needs(1) || (with_bias && needs(2)) {
                    let (dw, db) = kernels::conv2d_bwd_wb(
                        g.data(),
                        x.data(),
                        (n, ci, h, iw),
                        (co, kh, kw),
                        *stride,
                        with_bias,
                    );
                    if needs(1) {
                        self.accumulate(grads, ins[1], Tensor::new(w.dims().to_vec(), dw)?);
                    }
                    if with_bias && needs(2) {
                        self.accumulate(grads, ins[2], Tensor::new(vec![co], db.unwrap())?);
                    }
                }
            }
            Op::Linear => {
                let x = self.value(ins[0]);
                let w = self.value(ins[1]);
                let (n, fi) = x.dims2()?;
                let (fo, _) = w.dims2()?;
                let with_bias = ins.len() == 3;
                let (dx, dw, db) = kernels::linear_bwd(g.data(), x.data(), (n, fi), w.data(), fo, with_bias);
                if needs(0) {
                    self.accumulate(grads, ins[0], Tensor::new(x.dims().to_vec(), dx)?);
                }
                if needs(1) {
                    self.accumulate(grads, ins[1], Tensor::new(w.dims().to_vec(), dw)?);
                }
                if with_bias && needs(2) {
                    self.accumulate(grads, ins[2], Tensor::new(vec![fo], db.unwrap())?);
                }
            }
            Op::MaxPool2d { arg } => {
                let dx = kernels::maxpool_bwd(g.data(), arg, self.value(ins[0]).numel());
                self.accumulate(grads, ins[0], Tensor::new(self.value(ins[0]).dims().to_vec(), dx)?);
            }
            Op::Act(kind) => {
                let x = self.value(ins[0]);
                let y = &node.value;
                let data = match kind {
                    Activation::Tanh => y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yv, &gv)| gv * (1.0 - yv * yv))
                        .collect::<Vec<_>>(),
                    Activation::Sigmoid => y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yv, &gv)| gv * yv * (1.0 - yv))
                        .collect(),
                    Activation::Relu => x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                    Activation::Gelu => x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| {
                            let z = xv as f64;
                            let phi = 0.5 * (1.0 + kernels::erf(z / std::f64::consts::SQRT_2));
                            let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                            gv * ((phi + z * pdf) as f32)
                        })
                        .collect(),
                };
                self.accumulate(grads, ins[0], Tensor::new(x.dims().to_vec(), data)?);
            }
            Op::Add => {
                if needs(0) {
                    self.accumulate(grads, ins[0], g.clone());
                }
                if needs(1) {
                    self.accumulate(grads, ins[1], g.clone());
                }
            }
            Op::Sub => {
                if needs(0) {
                    self.accumulate(grads, ins[0], g.clone());
                }
                if needs(1) {
                    let data = g.data().iter().map(|&v| -v).collect();
                    self.accumulate(grads, ins[1], Tensor::new(g.dims().to_vec(), data)?);
                }
            }
            Op::Mul => {
                if needs(0) {
                    let data = g.data().iter().zip(self.value(ins[1]).data()).map(|(&gv, &bv)| gv * bv).collect();
                    self.accumulate(grads, ins[0], Tensor::new(g.dims().to_vec(), data)?);
                }
                if needs(1) {
                    let data = g.data().iter().zip(self.value(ins[0]).data()).map(|(&gv, &av)| gv * av).collect();
                    self.accumulate(grads, ins[1], Tensor::new(g.dims().to_vec(), data)?);
                }
            }
            Op::Div => {
                let a = self.value(ins[0]).data();
                let b = self.value(ins[1]).data();
                if needs(0) {
                    let data = g.data().iter().zip(b).map(|(&gv, &bv)| gv / bv).collect();
                    self.accumulate(grads, ins[0], Tensor::new(g.dims().to_vec(), data)?);
                }
                if needs(1) {
                    let data = g
                        .data()
                        .iter()
                        .zip(a.iter().zip(b))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    self.accumulate(grads, ins[1], Tensor::new(g.dims().to_vec(), data)?);
                }
            }
            Op::AddScalar => self.accumulate(grads, ins[0], g.clone()),
            Op::MulScalar(c) => {
                let data = g.data().iter().map(|&v| v * c).collect();
                self.accumulate(grads, ins[0], Tensor::new(g.dims().to_vec(), data)?);
            }
            Op::Exp => {
                let data = g.data().iter().zip(node.value.data()).map(|(&gv, &yv)| gv * yv).collect();
                self.accumulate(grads, ins[0], Tensor::new(g.dims().to_vec(), data)?);
            }
            Op::Log => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(ins[0]).data())
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                self.accumulate(grads, ins[0], Tensor::new(g.dims().to_vec(), data)?);
            }
            Op::Sqrt => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &yv)| gv * 0.5 / yv)
                    .collect();
                self.accumulate(grads, ins[0], Tensor::new(g.dims().to_vec(), data)?);
            }
            Op::Square => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(ins[0]).data())
                    .map(|(&gv, &xv)| gv * 2.0 * xv)
                    .collect();
                self.accumulate(grads, ins[0], Tensor::new(g.dims().to_vec(), data)?);
            }
            Op::Softplus => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(ins[0]).data())
                    .map(|(&gv, &xv)| gv * kernels::sigmoid(xv as f64) as f32)
                    .collect();
                self.accumulate(grads, ins[0], Tensor::new(g.dims().to_vec(), data)?);
            }
            Op::Sum => {
                let gv = g.data()[0];
                let x = self.value(ins[0]);
                self.accumulate(grads, ins[0], Tensor::full(x.dims().to_vec(), gv));
            }
            Op::Mean => {
                let x = self.value(ins[0]);
                let gv = g.data()[0] / x.numel() as f32;
                self.accumulate(grads, ins[0], Tensor::full(x.dims().to_vec(), gv));
            }
            Op::CrossEntropy { labels } => {
                let logits = self.value(ins[0]);
                let (n, c) = logits.dims2()?;
                let gv = g.data()[0] as f64 / n as f64;
                let mut data = vec![0.0f32; n * c];
                for (i, (row, &label)) in logits.data().chunks_exact(c).zip(labels).enumerate() {
                    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
                    let mut z = 0.0f64;
                    for &v in row {
                        z += (v as f64 - max).exp();
                    }
                    for j in 0..c {
                        let p = (row[j] as f64 - max).exp() / z;
                        let ind = if j == label as usize { 1.0 } else { 0.0 };
                        data[i * c + j] = ((p - ind) * gv) as f32;
                    }
                }
                self.accumulate(grads, ins[0], Tensor::new(logits.dims().to_vec(), data)?);
            }
            Op::Reshape => {
                let x = self.value(ins[0]);
                self.accumulate(grads, ins[0], g.reshape(x.dims().to_vec())?);
            }
            Op::SliceRows { start } => {
                let x = self.value(ins[0]);
                let (_, c) = x.dims2()?;
                let mut dx = Tensor::zeros(x.dims().to_vec());
                dx.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, ins[0], dx);
            }
            Op::ConcatRows => {
                let mut offset = 0;
                for &p in ins {
                    let part = self.value(p);
                    if self.nodes[p.0].needs_grad {
                        let data = g.data()[offset..offset + part.numel()].to_vec();
                        self.accumulate(grads, p, Tensor::new(part.dims().to_vec(), data)?);
                    }
                    offset += part.numel();
                }
            }
            Op::SliceCols { start } => {
                let x = self.value(ins[0]);
                let (r, c) = x.dims2()?;
                let (_, len) = g.dims2()?;
                let mut dx = Tensor::zeros(x.dims().to_vec());
                for i in 0..r {
                    dx.data_mut()[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, ins[0], dx);
            }
            Op::ConcatCols => {
                let (rows, cols) = node.value.dims2()?;
                let mut offset = 0;
                for &p in ins {
                    let part = self.value(p);
                    let (_, w) = part.dims2()?;
                    if self.nodes[p.0].needs_grad {
                        let mut data = Vec::with_capacity(part.numel());
                        for i in 0..rows {
                            data.extend_from_slice(&g.data()[i * cols + offset..i * cols + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(part.dims().to_vec(), data)?);
                    }
                    offset += w;
                }
            }
            Op::LayerNorm { eps } => {
                let x = self.value(ins[0]);
                let gamma = self.value(ins[1]).data();
                let (r, c) = x.dims2()?;
                let mut dx = vec![0.0f32; r * c];
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for i in 0..r {
                    let row = &x.data()[i * c..][..c];
                    let grow = &g.data()[i * c..][..c];
                    let (mean, var) = row_moments(row);
                    let inv = 1.0 / (var + *eps as f64).sqrt();
                    let mut sum_gg = 0.0f64;
                    let mut sum_ggx = 0.0f64;
                    for j in 0..c {
                        let xhat = (row[j] as f64 - mean) * inv;
                        let gg = grow[j] as f64 * gamma[j] as f64;
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                        dgamma[j] += grow[j] as f64 * xhat;
                        dbeta[j] += grow[j] as f64;
                    }
                    let cn = c as f64;
                    for j in 0..c {
                        let xhat = (row[j] as f64 - mean) * inv;
                        let gg = grow[j] as f64 * gamma[j] as f64;
                        dx[i * c + j] = ((gg - sum_gg / cn - xhat * sum_ggx / cn) * inv) as f32;
                    }
                }
                if needs(0) {
                    self.accumulate(grads, ins[0], Tensor::new(x.dims().to_vec(), dx)?);
                }
                if needs(1) {
                    let data = dgamma.iter().map(|&v| v as f32).collect();
                    self.accumulate(grads, ins[1], Tensor::new(vec![c], data)?);
                }
                if needs(2) {
                    let data = dbeta.iter().map(|&v| v as f32).collect();
                    self.accumulate(grads, ins[2], Tensor::new(vec![c], data)?);
                }
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let (r, c) = y.dims2()?;
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    let yrow = &y.data()[i * c..][..c];
                    let grow = &g.data()[i * c..][..c];
                    let mut dot = 0.0f64;
                    for j in 0..c {
                        dot += yrow[j] as f64 * grow[j] as f64;
                    }
                    for j in 0..c {
                        dx[i * c + j] = ((grow[j] as f64 - dot) * yrow[j] as f64) as f32;
                    }
                }
                self.accumulate(grads, ins[0], Tensor::new(y.dims().to_vec(), dx)?);
            }
            Op::MatMul { transpose_b } => {
                let a = self.value(ins[0]);
                let b = self.value(ins[1]);
                let (m, k) = a.dims2()?;
                let (gn_r, gn_c) = g.dims2()?;
                debug_assert_eq!(gn_r, m);
                let n = gn_c;
                if *transpose_b {
                    if needs(0) {
                        let da = kernels::matmul_nn(g.data(), (m, n), b.data(), k);
                        self.accumulate(grads, ins[0], Tensor::new(vec![m, k], da)?);
                    }
                    if needs(1) {
                        let db = kernels::matmul_tn(g.data(), (m, n), a.data(), k);
                        self.accumulate(grads, ins[1], Tensor::new(vec![n, k], db)?);
                    }
                } else {
                    if needs(0) {
                        let da = kernels::matmul_nt(g.data(), (m, n), b.data(), k);
                        self.accumulate(grads, ins[0], Tensor::new(vec![m, k], da)?);
                    }
                    if needs(1) {
                        let db = kernels::matmul_tn(a.data(), (m, k), g.data(), n);
                        self.accumulate(grads, ins[1], Tensor::new(vec![k, n], db)?);
                    }
                }
            }
            Op::RowNormalize => {
                let x = self.value(ins[0]);
                let (r, c) = x.dims2()?;
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    let row = &x.data()[i * c..][..c];
                    let grow = &g.data()[i * c..][..c];
                    let mut sq = 0.0f64;
                    let mut dot = 0.0f64;
                    for j in 0..c {
                        sq += row[j] as f64 * row[j] as f64;
                        dot += row[j] as f64 * grow[j] as f64;
                    }
                    // A numerically dead row (a relu head that never fired
                    // emits exact zeros) has no normalization direction, and
                    // the exact Jacobian's 1/eps slope there would flood the
                    // optimizer's moment estimates. It gets the zero
                    // subgradient; every healthy row gets the exact Jacobian.
                    let norm = sq.sqrt();
                    if norm < 1e-6 {
                        continue;
                    }
                    let nu = norm + 1e-12;
                    for j in 0..c {
                        let term = grow[j] as f64 / nu - row[j] as f64 * dot / (nu * nu * nu);
                        dx[i * c + j] = term as f32;
                    }
                }
                self.accumulate(grads, ins[0], Tensor::new(x.dims().to_vec(), dx)?);
            }
            Op::NtXent { temp } => {
                let s = self.value(ins[0]);
                let (r, c) = s.dims2()?;
                let t = *temp as f64;
                let gv = g.data()[0] as f64;
                let mut ds = vec![0.0f32; r * c];
                for i in 0..r {
                    let row = &s.data()[i * c..][..c];
                    let partner = i ^ 1;
                    let mut max = f64::NEG_INFINITY;
                    for (k, &v) in row.iter().enumerate() {
                        if k != i {
                            max = max.max(v as f64 / t);
                        }
                    }
                    let mut z = 0.0f64;
                    for (k, &v) in row.iter().enumerate() {
                        if k != i {
                            z += (v as f64 / t - max).exp();
                        }
                    }
                    for k in 0..c {
                        if k == i {
                            continue;
                        }
                        let p = (row[k] as f64 / t - max).exp() / z;
                        let ind = if k == partner { 1.0 } else { 0.0 };
                        ds[i * c + k] += (gv * (p - ind) / t) as f32;
                    }
                }
                self.accumulate(grads, ins[0], Tensor::new(s.dims().to_vec(), ds)?);
            }
        }
        Ok(())
    }
}

fn row_moments(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mut s = 0.0f64;
    for &v in row {
        s += v as f64;
    }
    let mean = s / n;
    let mut sq = 0.0f64;
    for &v in row {
        let d = v as f64 - mean;
        sq += d * d;
    }
    (mean, sq / n)
}

fn apply_act(kind: Activation, v: f32) -> f32 {
    match kind {
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => kernels::sigmoid(v as f64) as f32,
        Activation::Relu => v.max(0.0),
        Activation::Gelu => {
            let z = v as f64;
            (z * 0.5 * (1.0 + kernels::erf(z / std::f64::consts::SQRT_2))) as f32
        }
    }
}
