//! Row-major `f64` matrices and the handful of kernels the blocks need.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err("Matrix::from_vec", &[rows * cols], &[data.len()]));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("Matrix::from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Uniform entries in `[-scale, scale)`.
    pub fn random<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · wᵀ` where `w` is stored `[out × in]` like a linear layer weight.
    pub fn matmul_t(&self, w: &Matrix) -> Result<Matrix> {
        if self.cols != w.cols {
            return Err(shape_err("matmul_t", &[self.rows, w.cols], &self.shape()));
        }
        let mut out = Matrix::zeros(self.rows, w.rows);
        let inner = self.cols;
        exec::for_each_row(&mut out.data, w.rows, w.rows * inner, |i, row| {
            let a = &self.data[i * inner..(i + 1) * inner];
            for (o, wr) in row.iter_mut().zip(w.data.chunks_exact(inner)) {
                *o = dot(a, wr);
            }
        });
        Ok(out)
    }

    /// `self · b` with `b` stored `[in × out]`.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(shape_err("matmul", &[self.rows, b.rows], &self.shape()));
        }
        let mut out = Matrix::zeros(self.rows, b.cols);
        let (inner, width) = (self.cols, b.cols);
        exec::for_each_row(&mut out.data, width, width * inner, |i, row| {
            for k in 0..inner {
                let a = self.data[i * inner + k];
                if a == 0.0 {
                    continue;
                }
                for (o, bv) in row.iter_mut().zip(b.row(k)) {
                    *o += a * bv;
                }
            }
        });
        Ok(out)
    }

    /// `selfᵀ · b`, the weight-gradient shape `[self.cols × b.cols]`.
    pub fn t_matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.rows != b.rows {
            return Err(shape_err("t_matmul", &[b.rows], &[self.rows]));
        }
        self.transpose().matmul(b)
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Horizontal slice of columns `[start, start + width)`.
    pub fn columns(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    /// Concatenates two matrices side by side.
    pub fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
        debug_assert_eq!(a.rows, b.rows);
        let mut out = Matrix::zeros(a.rows, a.cols + b.cols);
        for i in 0..a.rows {
            let row = out.row_mut(i);
            row[..a.cols].copy_from_slice(a.row(i));
            row[a.cols..].copy_from_slice(b.row(i));
        }
        out
    }

    /// Stacks two matrices vertically.
    pub fn vcat(a: &Matrix, b: &Matrix) -> Matrix {
        debug_assert_eq!(a.cols, b.cols);
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        Matrix {
            rows: a.rows + b.rows,
            cols: a.cols,
            data,
        }
    }

    /// Rows `[start, start + count)`.
    pub fn row_range(&self, start: usize, count: usize) -> Matrix {
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add_vec(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}
