use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{AttentionMask, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Lerp(Var, Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaskedSoftmax(Var),
    Dropout { x: Var, keep_scale: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SumAll(Var),
    AddN(Vec<Var>),
    WeightedPool { x: Var, block_of: Vec<usize>, weight: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, target: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Wengert tape. Nodes are appended in evaluation order, so reverse index
/// order is a valid topological order for backpropagation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.rows()
    }

    fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].value.cols()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push("input", value, Op::Leaf, false)
    }

    /// Free leaf whose gradient is tracked (used by tests and probes).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// Parameter leaf. Repeated requests for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let idx = id.index();
        if self.param_nodes.len() <= idx {
            self.param_nodes.resize(idx + 1, None);
        }
        if let Some(v) = self.param_nodes[idx] {
            return v;
        }
        let value = store.value(id).clone();
        self.nodes.push(Node { value, op: Op::Param(id), requires_grad: true, grad: None });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[idx] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.needs(&[a, b]);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (n, k2) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.needs(&[a, b]);
        self.push("matmul_nt", Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        self.push("add", value, Op::Add(a, b), rg)
    }

    /// Adds row vector `b` (length = cols of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.cols(x);
        if self.value(b).len() != cols {
            return Err(Error::shape("add_row", format!("row of {} onto {} columns", self.value(b).len(), cols)));
        }
        let bias = self.value(b).data();
        let data = self.value(x).data().chunks(cols).flat_map(|r| r.iter().zip(bias).map(|(v, c)| v + c)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.needs(&[x, b]);
        self.push("add_row", value, Op::AddRow(x, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        self.push("mul", value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.needs(&[x]);
        self.push("scale", value, Op::Scale(x, c), rg)
    }

    /// `λ·a + (1 − λ)·b`
    pub fn lerp(&mut self, a: Var, b: Var, lambda: f64) -> Result<Var> {
        self.same_shape("lerp", a, b)?;
        let mu = 1.0 - lambda;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| lambda * x + mu * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        self.push("lerp", value, Op::Lerp(a, b, lambda), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.needs(&[x]);
        self.push("gelu", value, Op::Gelu(x), rg)
    }

    /// Per-row normalization with population variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = (self.rows(x), self.cols(x));
        if d == 0 {
            return Err(Error::shape("layer_norm", "zero-width rows"));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", format!("affine params must have length {d}")));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.needs(&[x, gain, bias]);
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    /// Row softmax over allowed entries; disallowed entries are exactly zero.
    /// `None` means every entry is allowed.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Option<&Arc<AttentionMask>>) -> Result<Var> {
        let (rows, cols) = (self.rows(x), self.cols(x));
        if let Some(m) = mask {
            if m.side() != rows || rows != cols {
                return Err(Error::shape(
                    "masked_softmax_rows",
                    format!("mask side {} against {rows}x{cols} scores", m.side()),
                ));
            }
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let allowed = |j: usize| mask.is_none_or(|m| m.allowed(r, j));
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyMaskRow { row: r });
            }
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.needs(&[x]);
        self.push("masked_softmax_rows", value, Op::MaskedSoftmax(x), rg)
    }

    /// Inverted dropout: entries kept with probability `1 − p` and scaled by `1/(1 − p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let keep_scale: Vec<f64> =
            (0..self.value(x).len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { scale }).collect();
        let data = self.value(x).data().iter().zip(&keep_scale).map(|(v, s)| v * s).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.needs(&[x]);
        self.push("dropout", value, Op::Dropout { x, keep_scale }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let cols = self.cols(first);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.cols(p) != cols {
                return Err(Error::shape("concat_rows", format!("width {} vs {cols}", self.cols(p))));
            }
            rows += self.rows(p);
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.needs(parts);
        self.push("concat_rows", Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, rows: Range<usize>) -> Result<Var> {
        let (n, cols) = (self.rows(x), self.cols(x));
        if rows.start >= rows.end || rows.end > n {
            return Err(Error::shape("slice_rows", format!("rows {rows:?} of {n}")));
        }
        let data = self.value(x).data()[rows.start * cols..rows.end * cols].to_vec();
        let rg = self.needs(&[x]);
        let value = Tensor::matrix(rows.len(), cols, data)?;
        self.push("slice_rows", value, Op::SliceRows { x, start: rows.start }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push("sum_all", Tensor::scalar(total), Op::SumAll(x), rg)
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("add_n", "no inputs"));
        };
        let mut data = self.value(first).data().to_vec();
        for &p in &parts[1..] {
            self.same_shape("add_n", first, p)?;
            add_into(&mut data, self.value(p).data());
        }
        let value = Tensor::new(self.shape(first).to_vec(), data)?;
        let rg = self.needs(parts);
        self.push("add_n", value, Op::AddN(parts.to_vec()), rg)
    }

    /// Weighted sum of contiguous row blocks: output row `j` is
    /// `Σ_{t ∈ blocks[j]} weights[t] · x[t]`. Weights are treated as constants.
    pub fn weighted_block_pool(&mut self, x: Var, blocks: &[Range<usize>], weights: &[f64]) -> Result<Var> {
        let (n, cols) = (self.rows(x), self.cols(x));
        let block_of = block_index(n, blocks)?;
        if weights.len() != n {
            return Err(Error::shape("weighted_block_pool", format!("{} weights for {n} rows", weights.len())));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; blocks.len() * cols];
        for t in 0..n {
            let w = weights[t];
            let orow = &mut out[block_of[t] * cols..(block_of[t] + 1) * cols];
            for (o, v) in orow.iter_mut().zip(&xs[t * cols..(t + 1) * cols]) {
                *o += w * v;
            }
        }
        let rg = self.needs(&[x]);
        let value = Tensor::matrix(blocks.len(), cols, out)?;
        self.push("weighted_block_pool", value, Op::WeightedPool { x, block_of, weight: weights.to_vec() }, rg)
    }

    /// Per-channel max over contiguous row blocks. Ties resolve to the first row.
    pub fn max_block_pool(&mut self, x: Var, blocks: &[Range<usize>]) -> Result<Var> {
        let (n, cols) = (self.rows(x), self.cols(x));
        block_index(n, blocks)?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; blocks.len() * cols];
        let mut argmax = vec![0; blocks.len() * cols];
        for (j, block) in blocks.iter().enumerate() {
            for c in 0..cols {
                let mut best = block.start;
                for t in block.clone() {
                    if xs[t * cols + c] > xs[best * cols + c] {
                        best = t;
                    }
                }
                out[j * cols + c] = xs[best * cols + c];
                argmax[j * cols + c] = best;
            }
        }
        let rg = self.needs(&[x]);
        let value = Tensor::matrix(blocks.len(), cols, out)?;
        self.push("max_block_pool", value, Op::MaxPool { x, argmax }, rg)
    }

    /// Cross-entropy between `softmax(logits)` and a (possibly soft) target
    /// distribution. `logits` must be a single row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != 1 || z.cols() != target.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} against {} targets", z.shape(), target.len()),
            ));
        }
        let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_total = z.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(target.len());
        for (&zi, &yi) in z.data().iter().zip(target) {
            let log_p = zi - max - log_total;
            probs.push(log_p.exp());
            loss -= yi * log_p;
        }
        let rg = self.needs(&[logits]);
        let op = Op::SoftmaxCrossEntropy { logits, target: target.to_vec(), probs };
        self.push("softmax_cross_entropy", Tensor::scalar(loss), op, rg)
    }

    /// Accumulated gradient of a tracked leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of leaves and
    /// parameters accumulate into their slots across repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let acc = |v: Var, delta: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => add_into(existing, &delta),
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k, n) = (self.rows(*a), self.cols(*a), self.cols(*b));
                    if self.nodes[a.0].requires_grad {
                        let mut da = vec![0.0; m * k];
                        matmul_nt(&g, self.value(*b).data(), m, n, k, &mut da);
                        acc(*a, da, &mut grads);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![0.0; k * n];
                        matmul_tn(self.value(*a).data(), &g, m, k, n, &mut db);
                        acc(*b, db, &mut grads);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (m, k, n) = (self.rows(*a), self.cols(*a), self.rows(*b));
                    if self.nodes[a.0].requires_grad {
                        let mut da = vec![0.0; m * k];
                        matmul_nn(&g, self.value(*b).data(), m, n, k, &mut da);
                        acc(*a, da, &mut grads);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![0.0; n * k];
                        matmul_tn(&g, self.value(*a).data(), m, n, k, &mut db);
                        acc(*b, db, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::AddRow(x, b) => {
                    let cols = self.cols(*x);
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        add_into(&mut db, row);
                    }
                    acc(*b, db, &mut grads);
                    acc(*x, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect(), &mut grads);
                    acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect(), &mut grads);
                }
                Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect(), &mut grads),
                Op::Lerp(a, b, lambda) => {
                    let mu = 1.0 - lambda;
                    acc(*a, g.iter().map(|v| v * lambda).collect(), &mut grads);
                    acc(*b, g.iter().map(|v| v * mu).collect(), &mut grads);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    acc(*x, g.iter().zip(xv).map(|(g, &x)| g * gelu_grad(x)).collect(), &mut grads);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let d = self.cols(*x);
                    let gv = self.value(*gain).data();
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let mut dx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dgain[j] += grow[j] * hrow[j];
                            dbias[j] += grow[j];
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            dx[r * d + j] = is * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    acc(*gain, dgain, &mut grads);
                    acc(*bias, dbias, &mut grads);
                    acc(*x, dx, &mut grads);
                }
                Op::MaskedSoftmax(x) => {
                    let cols = self.cols(*x);
                    let y = node.value.data();
                    let mut dx = vec![0.0; g.len()];
                    for ((dxr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dxr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::Dropout { x, keep_scale } => {
                    acc(*x, g.iter().zip(keep_scale).map(|(g, s)| g * s).collect(), &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        acc(p, g[offset..offset + len].to_vec(), &mut grads);
                        offset += len;
                    }
                }
                Op::SliceRows { x, start } => {
                    let cols = self.cols(*x);
                    let mut dx = vec![0.0; self.value(*x).len()];
                    dx[start * cols..start * cols + g.len()].copy_from_slice(&g);
                    acc(*x, dx, &mut grads);
                }
                Op::SumAll(x) => acc(*x, vec![g[0]; self.value(*x).len()], &mut grads),
                Op::AddN(parts) => {
                    for &p in parts {
                        acc(p, g.clone(), &mut grads);
                    }
                }
                Op::WeightedPool { x, block_of, weight } => {
                    let cols = self.cols(*x);
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (t, (&b, &w)) in block_of.iter().zip(weight).enumerate() {
                        for c in 0..cols {
                            dx[t * cols + c] = w * g[b * cols + c];
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::MaxPool { x, argmax } => {
                    let cols = self.cols(*x);
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (o, &t) in argmax.iter().enumerate() {
                        dx[t * cols + o % cols] += g[o];
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::SoftmaxCrossEntropy { logits, target, probs } => {
                    let mass: f64 = target.iter().sum();
                    let dz = probs.iter().zip(target).map(|(p, y)| g[0] * (p * mass - y)).collect();
                    acc(*logits, dz, &mut grads);
                }
            }
        }

        for (idx, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[idx];
            if !matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            match &mut node.grad {
                Some(existing) => add_into(existing.data_mut(), &g),
                slot => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    /// Adds every parameter node's gradient into the store's grad slots.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                add_into(store.get_mut(*id).grad.data_mut(), g.data());
            }
        }
    }
}

/// Validates that `blocks` tile `0..n` contiguously and maps rows to blocks.
fn block_index(n: usize, blocks: &[Range<usize>]) -> Result<Vec<usize>> {
    let mut block_of = Vec::with_capacity(n);
    let mut next = 0;
    for (j, b) in blocks.iter().enumerate() {
        if b.start != next || b.end <= b.start {
            return Err(Error::Pool(format!("block {j} ({b:?}) does not continue at row {next}")));
        }
        block_of.extend(std::iter::repeat_n(j, b.len()));
        next = b.end;
    }
    if next != n {
        return Err(Error::Pool(format!("blocks cover {next} of {n} rows")));
    }
    Ok(block_of)
}
