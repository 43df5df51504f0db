//! Dense row-major `f32` matrices and single-head scaled dot-product attention.
//!
//! Every reduction runs left to right over the summed index and accumulates in
//! `f64`, so results are bit-reproducible and independent of thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("Matrix::new", format!("empty shape {rows}x{cols}")));
        }
        if values.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for shape {rows}x{cols}", values.len()),
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.values[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.values.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            values: out,
        }
    }

    /// Stacks `self` on top of `others`, in order.
    pub fn vstack<'a>(&self, others: impl IntoIterator<Item = &'a Matrix>) -> Result<Matrix> {
        let mut values = self.values.clone();
        let mut rows = self.rows;
        for m in others {
            if m.cols != self.cols {
                return Err(Error::shape("vstack", format!("{} columns vs {}", m.cols, self.cols)));
            }
            values.extend_from_slice(&m.values);
            rows += m.rows;
        }
        Ok(Matrix {
            rows,
            cols: self.cols,
            values,
        })
    }

    /// Rows at `indices`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::shape("select_rows", format!("row {i} of {}", self.rows)));
            }
            values.extend_from_slice(self.row(i));
        }
        Matrix::new(indices.len(), self.cols, values)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            values,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Plain matrix product, accumulated in `f64` in definition order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0f32; a.rows * b.cols];
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..a.cols {
            let aik = a.values[i * a.cols + k] as f64;
            let brow = b.row(k);
            for (slot, &bkj) in acc.iter_mut().zip(brow) {
                *slot += aik * bkj as f64;
            }
        }
        for (o, &s) in out[i * b.cols..(i + 1) * b.cols].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
    Matrix::new(a.rows, b.cols, out)
}

/// `a × bᵀ` without materializing the transpose.
fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_transposed",
            format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            let dot: f64 = ar.iter().zip(b.row(j)).fold(0.0, |s, (&x, &y)| s + x as f64 * y as f64);
            out.push(dot as f32);
        }
    }
    Matrix::new(a.rows, b.rows, out)
}

/// Row-wise softmax. `-inf` entries receive exactly zero weight.
pub fn softmax_rows(scores: &Matrix) -> Result<Matrix> {
    let mut out = Vec::with_capacity(scores.values.len());
    let mut exps = vec![0.0f64; scores.cols];
    for r in 0..scores.rows {
        let row = scores.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let mut total = 0.0f64;
        for (e, &s) in exps.iter_mut().zip(row) {
            *e = if s == f32::NEG_INFINITY {
                0.0
            } else {
                (s as f64 - max as f64).exp()
            };
            total += *e;
        }
        out.extend(exps.iter().map(|&e| (e / total) as f32));
    }
    Matrix::new(scores.rows, scores.cols, out)
}

/// All intermediates of one attention evaluation.
#[derive(Debug, Clone)]
pub struct AttentionTensors {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Pre-softmax logits, mask included.
    pub scores: Matrix,
    pub weights: Matrix,
    pub output: Matrix,
}

/// `softmax(q kᵀ / √d + mask) v` with every intermediate retained.
pub fn scaled_dot_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    additive_mask: Option<&Matrix>,
) -> Result<AttentionTensors> {
    if q.cols != k.cols {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("query width {} vs key width {}", q.cols, k.cols),
        ));
    }
    if k.rows != v.rows {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("{} keys vs {} values", k.rows, v.rows),
        ));
    }
    let mut scores = matmul_transposed(q, k)?;
    let inv_sqrt_d = 1.0 / (q.cols as f64).sqrt();
    for s in scores.values.iter_mut() {
        *s = (*s as f64 * inv_sqrt_d) as f32;
    }
    if let Some(mask) = additive_mask {
        if mask.shape() != scores.shape() {
            return Err(Error::shape(
                "scaled_dot_attention",
                format!("mask {:?} vs scores {:?}", mask.shape(), scores.shape()),
            ));
        }
        for (s, &m) in scores.values.iter_mut().zip(&mask.values) {
            *s += m;
        }
    }
    let weights = softmax_rows(&scores)?;
    let output = matmul(&weights, v)?;
    Ok(AttentionTensors {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        scores,
        weights,
        output,
    })
}
