//! Dense row-major `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! Values live in [`Tensor`]. Differentiable computation is recorded on a
//! [`Graph`]; every op validates shapes, refuses to emit NaN/Inf, and
//! registers its backward rule. Rank-1 tensors are treated as a single row
//! wherever a matrix view is needed.

mod graph;
mod kernels;

pub use graph::{Graph, Var};
pub use kernels::{matmul_nn, matmul_nt, matmul_tn};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    /// Row-major `rows × cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count of the matrix view (rank-0 and rank-1 tensors are one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Column count of the matrix view.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            r => self.shape[r - 1],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.data, &other.data, m, k, n, &mut out);
        Tensor::matrix(m, n, out)
    }
}

/// Binary allow-matrix restricting which keys each query row may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    side: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn dense(side: usize) -> Self {
        Self { side, allow: vec![true; side * side] }
    }

    pub fn from_fn(side: usize, mut allowed: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                allow.push(allowed(i, j));
            }
        }
        Self { side, allow }
    }

    pub fn from_rows(rows: &[&[bool]]) -> Result<Self> {
        let side = rows.len();
        if rows.iter().any(|r| r.len() != side) {
            return Err(Error::shape("mask", "mask must be square"));
        }
        Ok(Self { side, allow: rows.iter().flat_map(|r| r.iter().copied()).collect() })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.side + j]
    }

    pub fn row_degree(&self, i: usize) -> usize {
        self.allow[i * self.side..(i + 1) * self.side].iter().filter(|&&a| a).count()
    }

    /// Total number of allowed (query, key) pairs.
    pub fn allowed_count(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    pub fn is_dense(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }
}

/// Softmax of a plain slice, stabilized by max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
