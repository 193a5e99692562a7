//! The standard pre-norm decoder block that a HATB extends.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attend, attend_backward, AttentionOut, KeyMask};
use super::layers::{
    gelu, gelu_grad, join, visit_matrix, visit_matrix_mut, LayerNorm, LnCache, Params, Visit, VisitMut,
};
use super::rotary::{apply_rotary, apply_rotary_inverse};
use crate::error::Result;
use crate::tensor::{add_vec, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostBlock {
    pub n_heads: usize,
    pub ln1: LayerNorm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: LayerNorm,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl HostBlock {
    pub fn init<R: Rng>(dim: usize, n_heads: usize, ffn_dim: usize, rng: &mut R) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let sf = 1.0 / (ffn_dim as f64).sqrt();
        let mut ln1 = LayerNorm::new(dim);
        let mut ln2 = LayerNorm::new(dim);
        // Perturbed affine terms keep every gradient path non-degenerate.
        for ln in [&mut ln1, &mut ln2] {
            ln.gamma.iter_mut().for_each(|g| *g += rng.gen_range(-0.1..0.1));
            ln.beta.iter_mut().for_each(|b| *b += rng.gen_range(-0.1..0.1));
        }
        Self {
            n_heads,
            ln1,
            wq: Matrix::random(dim, dim, s, rng),
            wk: Matrix::random(dim, dim, s, rng),
            wv: Matrix::random(dim, dim, s, rng),
            wo: Matrix::random(dim, dim, s, rng),
            ln2,
            w1: Matrix::random(ffn_dim, dim, s, rng),
            b1: (0..ffn_dim).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            w2: Matrix::random(dim, ffn_dim, sf, rng),
            b2: (0..dim).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.n_heads
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// LN1, Q/K/V projections with rotary, causal attention, output projection.
    pub fn self_attention(&self, x: &Matrix, positions: &[usize], keep: bool) -> Result<(Matrix, SelfAttnCache)> {
        let (n, ln1) = self.ln1.forward(x)?;
        let q = apply_rotary(&n.matmul_t(&self.wq)?, self.n_heads, positions)?;
        let k = apply_rotary(&n.matmul_t(&self.wk)?, self.n_heads, positions)?;
        let v = n.matmul_t(&self.wv)?;
        let attn = attend(&q, &k, &v, self.n_heads, KeyMask::Causal, keep)?;
        let h_self = attn.out.matmul_t(&self.wo)?;
        Ok((h_self, SelfAttnCache { ln1, n, q, k, v, attn }))
    }

    pub fn mlp(&self, n2: &Matrix) -> Result<(Matrix, MlpCache)> {
        let mut u = n2.matmul_t(&self.w1)?;
        for i in 0..u.rows {
            add_vec(u.row_mut(i), &self.b1);
        }
        let mut a = u.clone();
        a.data.iter_mut().for_each(|v| *v = gelu(*v));
        let mut y = a.matmul_t(&self.w2)?;
        for i in 0..y.rows {
            add_vec(y.row_mut(i), &self.b2);
        }
        Ok((y, MlpCache { n2: n2.clone(), u, a }))
    }

    /// Returns the gradient w.r.t. the MLP input.
    pub fn mlp_backward(&self, cache: &MlpCache, dy: &Matrix, grad: &mut HostBlock) -> Result<Matrix> {
        grad.w2.add_assign(&dy.t_matmul(&cache.a)?);
        add_vec(&mut grad.b2, &dy.column_sums());
        let mut du = dy.matmul(&self.w2)?;
        for (g, u) in du.data.iter_mut().zip(&cache.u.data) {
            *g *= gelu_grad(*u);
        }
        grad.w1.add_assign(&du.t_matmul(&cache.n2)?);
        add_vec(&mut grad.b1, &du.column_sums());
        du.matmul(&self.w1)
    }

    /// Residual tail shared by every block: `x1 + MLP(LN2(x1))`.
    pub fn ffn_residual(&self, x1: &Matrix) -> Result<(Matrix, FfnCache)> {
        let (n2, ln2) = self.ln2.forward(x1)?;
        let (y, mlp) = self.mlp(&n2)?;
        Ok((x1.add(&y), FfnCache { ln2, mlp }))
    }

    /// Gradient of [`Self::ffn_residual`] w.r.t. `x1`, residual included.
    pub fn ffn_residual_backward(&self, cache: &FfnCache, d_out: &Matrix, grad: &mut HostBlock) -> Result<Matrix> {
        let dn2 = self.mlp_backward(&cache.mlp, d_out, grad)?;
        let mut dx1 = self.ln2.backward(&cache.ln2, &dn2, &mut grad.ln2);
        dx1.add_assign(d_out);
        Ok(dx1)
    }

    /// Back-propagates gradients arriving at the rotated Q, rotated K and V of
    /// the self-attention input projections; returns the gradient w.r.t. `x`.
    pub fn qkv_backward(
        &self,
        cache: &SelfAttnCache,
        positions: &[usize],
        dq_rot: &Matrix,
        dk_rot: &Matrix,
        dv: &Matrix,
        grad: &mut HostBlock,
    ) -> Result<Matrix> {
        let dq = apply_rotary_inverse(dq_rot, self.n_heads, positions)?;
        let dk = apply_rotary_inverse(dk_rot, self.n_heads, positions)?;
        grad.wq.add_assign(&dq.t_matmul(&cache.n)?);
        grad.wk.add_assign(&dk.t_matmul(&cache.n)?);
        grad.wv.add_assign(&dv.t_matmul(&cache.n)?);
        let mut dn = dq.matmul(&self.wq)?;
        dn.add_assign(&dk.matmul(&self.wk)?);
        dn.add_assign(&dv.matmul(&self.wv)?);
        Ok(self.ln1.backward(&cache.ln1, &dn, &mut grad.ln1))
    }

    pub fn forward(&self, x: &Matrix, positions: &[usize], keep: bool) -> Result<(Matrix, BlockCache)> {
        let (h_self, sa) = self.self_attention(x, positions, keep)?;
        let x1 = x.add(&h_self);
        let (out, ffn) = self.ffn_residual(&x1)?;
        Ok((out, BlockCache { sa, ffn }))
    }

    pub fn backward(
        &self,
        cache: &BlockCache,
        positions: &[usize],
        d_out: &Matrix,
        grad: &mut HostBlock,
    ) -> Result<Matrix> {
        let dx1 = self.ffn_residual_backward(&cache.ffn, d_out, grad)?;
        let mut dx = self.self_attention_backward(&cache.sa, positions, &dx1, grad)?;
        dx.add_assign(&dx1);
        Ok(dx)
    }

    /// Gradient w.r.t. the block input through the attention branch only.
    pub fn self_attention_backward(
        &self,
        sa: &SelfAttnCache,
        positions: &[usize],
        dh_self: &Matrix,
        grad: &mut HostBlock,
    ) -> Result<Matrix> {
        grad.wo.add_assign(&dh_self.t_matmul(&sa.attn.out)?);
        let da = dh_self.matmul(&self.wo)?;
        let g = attend_backward(&sa.q, &sa.k, &sa.v, &sa.attn, &da)?;
        self.qkv_backward(sa, positions, &g.dq, &g.dk, &g.dv, grad)
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttnCache {
    pub ln1: LnCache,
    pub n: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attn: AttentionOut,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    pub n2: Matrix,
    pub u: Matrix,
    pub a: Matrix,
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    pub ln2: LnCache,
    pub mlp: MlpCache,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub sa: SelfAttnCache,
    pub ffn: FfnCache,
}

impl Params for HostBlock {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        visit_matrix(prefix, "wq", &self.wq, f);
        visit_matrix(prefix, "wk", &self.wk, f);
        visit_matrix(prefix, "wv", &self.wv, f);
        visit_matrix(prefix, "wo", &self.wo, f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        visit_matrix(prefix, "w1", &self.w1, f);
        f(&join(prefix, "b1"), &[self.b1.len()], &self.b1);
        visit_matrix(prefix, "w2", &self.w2, f);
        f(&join(prefix, "b2"), &[self.b2.len()], &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        visit_matrix_mut(prefix, "wq", &mut self.wq, f);
        visit_matrix_mut(prefix, "wk", &mut self.wk, f);
        visit_matrix_mut(prefix, "wv", &mut self.wv, f);
        visit_matrix_mut(prefix, "wo", &mut self.wo, f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        visit_matrix_mut(prefix, "w1", &mut self.w1, f);
        let n = self.b1.len();
        f(&join(prefix, "b1"), &[n], &mut self.b1);
        visit_matrix_mut(prefix, "w2", &mut self.w2, f);
        let n = self.b2.len();
        f(&join(prefix, "b2"), &[n], &mut self.b2);
    }
}
