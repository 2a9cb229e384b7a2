//! Dense row-major `f64` tensors and the handful of kernels the layer set needs.
//!
//! Every reduction accumulates left to right in index order, so results are
//! bitwise reproducible across runs and across process layouts.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_RANK: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("invalid shape {0:?}: rank must be 1..=4 and every dimension >= 1")]
    InvalidShape(Vec<usize>),
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("row range {start}..{end} out of bounds for {rows} rows")]
    RowRange { start: usize, end: usize, rows: usize },
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<(), TensorError> {
    if shape.is_empty() || shape.len() > MAX_RANK || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self, TensorError> {
        check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        })
    }

    pub fn identity(n: usize) -> Result<Self, TensorError> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Builds a rank-2 tensor from row slices.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::DataLength {
                    shape: vec![rows.len(), cols],
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![data.len()], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading dimension (the batch axis for activations).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading-axis row.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    fn expect_rank(&self, op: &'static str, expected: usize) -> Result<(), TensorError> {
        if self.rank() != expected {
            return Err(TensorError::Rank {
                op,
                expected,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// `[m×k] · [k×n]`. Each output element sums over `k` in ascending order.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.expect_rank("matmul", 2)?;
        rhs.expect_rank("matmul", 2)?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            // i-k-j loop: for a fixed output element the k terms are still
            // added in ascending k order.
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[kk * n..(kk + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `selfᵀ · rhs` without materializing the transpose. Same summation
    /// order as `self.transpose()?.matmul(rhs)`.
    pub fn t_matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.expect_rank("t_matmul", 2)?;
        rhs.expect_rank("t_matmul", 2)?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (m2, n) = (rhs.shape[0], rhs.shape[1]);
        if m != m2 {
            return Err(TensorError::ShapeMismatch {
                op: "t_matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let b_row = &rhs.data[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                for (o, &b) in out[kk * n..(kk + 1) * n].iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![k, n], out)
    }

    /// `self · rhsᵀ` without materializing the transpose. Same summation
    /// order as `self.matmul(&rhs.transpose()?)`.
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.expect_rank("matmul_t", 2)?;
        rhs.expect_rank("matmul_t", 2)?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (n, k2) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.push(acc);
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        self.expect_rank("transpose", 2)?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        self.same_shape(op, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|x| if x > 0.0 { x } else { 0.0 })
    }

    /// Back-propagates `upstream` through a ReLU whose forward input was `self`.
    pub fn relu_grad(&self, upstream: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with("relu_grad", upstream, |x, g| if x > 0.0 { g } else { 0.0 })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), TensorError> {
        self.same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += other * c`.
    pub fn add_scaled_assign(&mut self, other: &Tensor, c: f64) -> Result<(), TensorError> {
        self.same_shape("add_scaled_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * c;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` tensor.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        self.expect_rank("add_row_vector", 2)?;
        let n = self.shape[1];
        if bias.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vector",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Column sums of an `[m×n]` tensor, rows added in ascending order.
    pub fn sum_rows(&self) -> Result<Tensor, TensorError> {
        self.expect_rank("sum_rows", 2)?;
        let n = self.shape[1];
        let mut out = vec![0.0; n];
        for row in self.data.chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        Tensor::new(vec![n], out)
    }

    /// Copies leading-axis rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor, TensorError> {
        if start >= end || end > self.rows() {
            return Err(TensorError::RowRange {
                start,
                end,
                rows: self.rows(),
            });
        }
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * w..end * w].to_vec())
    }

    /// Gathers leading-axis rows by index.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= self.rows() {
                return Err(TensorError::RowRange {
                    start: i,
                    end: i + 1,
                    rows: self.rows(),
                });
            }
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    /// Index of the maximum of each row of a rank-2 tensor (first wins on ties).
    pub fn argmax_rows(&self) -> Result<Vec<usize>, TensorError> {
        self.expect_rank("argmax_rows", 2)?;
        let n = self.shape[1];
        Ok(self
            .data
            .chunks(n)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor, TensorError> {
        let mut t = Tensor::zeros(&[labels.len().max(1), classes])?;
        if labels.is_empty() {
            return Err(TensorError::InvalidShape(vec![0, classes]));
        }
        for (i, &c) in labels.iter().enumerate() {
            if c >= classes {
                return Err(TensorError::RowRange {
                    start: c,
                    end: c + 1,
                    rows: classes,
                });
            }
            t.data[i * classes + c] = 1.0;
        }
        Ok(t)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// FNV-1a over the IEEE-754 bit patterns and the shape; equal iff bitwise equal
    /// (modulo hash collisions).
    pub fn checksum(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for &d in &self.shape {
            h = fnv_mix(h, d as u64);
        }
        for &x in &self.data {
            h = fnv_mix(h, x.to_bits());
        }
        h
    }

    /// Largest elementwise `|a-b| / max(1, |a|, |b|)`.
    pub fn max_rel_diff(&self, other: &Tensor) -> Result<f64, TensorError> {
        self.same_shape("max_rel_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs() / 1f64.max(a.abs()).max(b.abs()))
            .fold(0.0, f64::max))
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv_mix(mut h: u64, word: u64) -> u64 {
    for b in word.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Elementwise operation selector, for call sites that pick the op at runtime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Hadamard,
    Scale(f64),
    Relu,
    /// `a` is the forward input, `b` the upstream gradient.
    ReluGrad,
}

pub fn elementwise(op: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor, TensorError> {
    let rhs = |name| {
        b.ok_or(TensorError::ShapeMismatch {
            op: name,
            lhs: a.shape.clone(),
            rhs: vec![],
        })
    };
    match op {
        Elementwise::Add => a.add(rhs("add")?),
        Elementwise::Sub => a.sub(rhs("sub")?),
        Elementwise::Hadamard => a.hadamard(rhs("hadamard")?),
        Elementwise::Scale(c) => Ok(a.scale(c)),
        Elementwise::Relu => Ok(a.relu()),
        Elementwise::ReluGrad => a.relu_grad(rhs("relu_grad")?),
    }
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
pub fn softmax_xent(logits: &Tensor, labels: &Tensor) -> Result<(f64, Tensor), TensorError> {
    logits.expect_rank("softmax_xent", 2)?;
    logits.same_shape("softmax_xent", labels)?;
    if let Some(index) = logits.data.iter().position(|x| !x.is_finite()) {
        return Err(TensorError::NonFinite {
            op: "softmax_xent",
            index,
        });
    }
    let (m, c) = (logits.shape[0], logits.shape[1]);
    let inv_m = 1.0 / m as f64;
    let mut grad = vec![0.0; m * c];
    let mut loss = 0.0;
    for i in 0..m {
        let row = &logits.data[i * c..(i + 1) * c];
        let label = &labels.data[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - max).exp();
        }
        let log_denom = denom.ln();
        let mut row_loss = 0.0;
        for j in 0..c {
            let log_p = row[j] - max - log_denom;
            row_loss -= label[j] * log_p;
            grad[i * c + j] = (log_p.exp() - label[j]) * inv_m;
        }
        loss += row_loss;
    }
    Ok((loss * inv_m, Tensor::new(vec![m, c], grad)?))
}
