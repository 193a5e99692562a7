//! Layer normalization, activations and a parameter visitor.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-6;

/// Callback receiving `(name, shape, values)`.
pub type Visit<'a> = dyn FnMut(&str, &[usize], &[f64]) + 'a;
pub type VisitMut<'a> = dyn FnMut(&str, &[usize], &mut [f64]) + 'a;

/// Visits every trainable tensor as `(name, shape, values)`.
///
/// Gradients are stored in the same struct type as the parameters, so the
/// same visitor walks both in lockstep.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>);

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    /// All values flattened in visiting order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, _, v| v.fill(0.0));
    }

    /// `self += a · other` for two values with the same layout.
    fn add_scaled(&mut self, other: &Self, a: f64)
    where
        Self: Sized,
    {
        let src = other.flatten();
        let mut off = 0;
        self.visit_mut("", &mut |_, _, v| {
            for (x, g) in v.iter_mut().zip(&src[off..]) {
                *x += a * g;
            }
            off += v.len();
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_matrix(prefix: &str, name: &str, m: &Matrix, f: &mut Visit<'_>) {
    f(&join(prefix, name), &[m.rows, m.cols], &m.data);
}

pub(crate) fn visit_matrix_mut(prefix: &str, name: &str, m: &mut Matrix, f: &mut VisitMut<'_>) {
    let shape = [m.rows, m.cols];
    f(&join(prefix, name), &shape, &mut m.data);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Matrix,
    pub rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LnCache)> {
        if x.cols != self.dim() {
            return Err(shape_err("layernorm", &[x.rows, self.dim()], &x.shape()));
        }
        let d = x.cols as f64;
        let mut y = Matrix::zeros(x.rows, x.cols);
        let mut xhat = Matrix::zeros(x.rows, x.cols);
        let mut rstd = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            if var <= 1e-24 * mean.abs().max(1.0).powi(2) {
                return Err(Error::ZeroVariance { row: i });
            }
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            let xh = xhat.row(i).to_vec();
            for (j, o) in y.row_mut(i).iter_mut().enumerate() {
                *o = xh[j] * self.gamma[j] + self.beta[j];
            }
        }
        Ok((y, LnCache { xhat, rstd }))
    }

    /// Returns `dx`; accumulates into the gamma/beta gradients.
    pub fn backward(&self, cache: &LnCache, dy: &Matrix, grad: &mut LayerNorm) -> Matrix {
        let d = dy.cols as f64;
        let mut dx = Matrix::zeros(dy.rows, dy.cols);
        for i in 0..dy.rows {
            let xh = cache.xhat.row(i);
            let g = dy.row(i);
            let mut dxhat = vec![0.0; dy.cols];
            for j in 0..dy.cols {
                grad.gamma[j] += g[j] * xh[j];
                grad.beta[j] += g[j];
                dxhat[j] = g[j] * self.gamma[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
            let r = cache.rstd[i];
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: vec![0.0; self.dim()],
            beta: vec![0.0; self.dim()],
        }
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        f(&join(prefix, "gamma"), &[self.dim()], &self.gamma);
        f(&join(prefix, "beta"), &[self.dim()], &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        let d = self.dim();
        f(&join(prefix, "gamma"), &[d], &mut self.gamma);
        f(&join(prefix, "beta"), &[d], &mut self.beta);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
