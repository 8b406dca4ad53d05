//! Dense row-major f64 matrices.
//!
//! This is deliberately a small fixed toolkit rather than a general tensor
//! library: the network, the adapters, and the autodiff tape are written
//! against exactly these operations. All operations allocate fresh output;
//! nothing aliases. On finite inputs every operation produces finite
//! entries, and the test suite enforces that as a property.
//!
//! `matmul` dispatches to a rayon row-parallel kernel when the `parallel`
//! feature is enabled and the output is large enough to amortize the fork.
//! The parallel kernel performs the same additions in the same order per
//! row, so the two paths are bit-identical; determinism never depends on
//! the feature set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Below this many output rows the parallel kernel is not worth the fork.
#[cfg(feature = "parallel")]
const PAR_MIN_ROWS: usize = 64;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major buffer. The length must be exactly rows*cols.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Gather the listed rows into a new matrix, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::contract(format!(
                    "row index {} out of bounds for {} rows",
                    i, self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    fn shape_err(&self, other: &Matrix, op: &'static str) -> Error {
        Error::Shape {
            op,
            left_rows: self.rows,
            left_cols: self.cols,
            right_rows: other.rows,
            right_cols: other.cols,
        }
    }

    /// Matrix product, dispatching to the parallel kernel when available.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(self.shape_err(other, "matmul"));
        }
        #[cfg(feature = "parallel")]
        {
            if self.rows >= PAR_MIN_ROWS {
                return Ok(self.matmul_par_unchecked(other));
            }
        }
        Ok(self.matmul_seq_unchecked(other))
    }

    /// Sequential matrix product, always available. Reference kernel.
    pub fn matmul_seq(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(self.shape_err(other, "matmul"));
        }
        Ok(self.matmul_seq_unchecked(other))
    }

    fn matmul_seq_unchecked(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, other.cols);
        for (i, out_row) in out.data.chunks_mut(other.cols).enumerate() {
            mul_row(self.row(i), other, out_row);
        }
        out
    }

    /// Row-parallel matrix product. Bit-identical to the sequential kernel.
    #[cfg(feature = "parallel")]
    pub fn matmul_par(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(self.shape_err(other, "matmul"));
        }
        Ok(self.matmul_par_unchecked(other))
    }

    #[cfg(feature = "parallel")]
    fn matmul_par_unchecked(&self, other: &Matrix) -> Matrix {
        use rayon::prelude::*;
        let mut out = Matrix::zeros(self.rows, other.cols);
        out.data
            .par_chunks_mut(other.cols)
            .enumerate()
            .for_each(|(i, out_row)| mul_row(self.row(i), other, out_row));
        out
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(self.shape_err(other, "add"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(self.shape_err(other, "sub"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Add a 1xN row vector to every row.
    pub fn add_row_broadcast(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(self.shape_err(row, "add_row_broadcast"));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            let base = r * out.cols;
            for c in 0..out.cols {
                out.data[base + c] += row.data[c];
            }
        }
        Ok(out)
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| k * v).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&self) -> Result<Matrix> {
        if self.cols == 0 {
            return Err(Error::contract("softmax over zero columns".to_string()));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(out)
    }

    /// Sum of squared entries.
    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    /// Population variance over all entries, computed two-pass.
    /// Used by the rank scheduler on per-layer activation batches.
    pub fn batch_variance(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::contract(
                "batch_variance of an empty matrix".to_string(),
            ));
        }
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|v| {
                let d = v - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        Ok(var)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(self.shape_err(other, "max_abs_diff"));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One output row: out_row[j] = sum_k a_row[k] * b[k][j], accumulated in
/// ascending k so the sequential and parallel kernels agree bitwise.
#[inline]
fn mul_row(a_row: &[f64], b: &Matrix, out_row: &mut [f64]) {
    for (k, &a_ik) in a_row.iter().enumerate() {
        let b_row = b.row(k);
        for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
            *o += a_ik * b_kj;
        }
    }
}
