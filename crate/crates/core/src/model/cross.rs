//! Gated cross-attention sub-layer used by the pre-cross, post-cross and
//! dense (every layer) fusion variants.
//!
//! `out[t] = h[t] + g[t] · Wo · attn(rope(h Wqᵀ), rope(K_img), V_img)[t]`
//! with `g[t] = sigmoid(w_gate · h[t])`, the same adaptive gate as the HATB.
//! Tokens that see no image pass through unchanged.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hyperattention::layers::{join, sigmoid, visit_matrix, visit_matrix_mut, Params, Visit, VisitMut};
use crate::hyperattention::rotary::{apply_rotary, apply_rotary_inverse};
use crate::hyperattention::{attend, attend_backward, AttentionOut, HostBlock, KeyMask};
use crate::interleave::{CrossAttentionMask, RotaryPositionMap};
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSublayer {
    pub wq: Matrix,
    /// `[2D × D]` visual key/value projection.
    pub w_kv: Matrix,
    pub wo: Matrix,
    pub w_gate: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CrossCache {
    h_in: Matrix,
    h_img: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    key_positions: Vec<usize>,
    attn: AttentionOut,
    c: Matrix,
    gate: Vec<f64>,
}

pub struct CrossContext<'a> {
    pub rope: &'a RotaryPositionMap,
    pub mask: &'a CrossAttentionMask,
    pub patches: usize,
    pub n_heads: usize,
}

impl CrossSublayer {
    /// Copies the host's projections so the branch starts from language-model weights.
    pub fn from_host(host: &HostBlock) -> Self {
        Self {
            wq: host.wq.clone(),
            w_kv: Matrix::vcat(&host.wk, &host.wv),
            wo: host.wo.clone(),
            w_gate: vec![0.0; host.dim()],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn forward(
        &self,
        h: &Matrix,
        h_img: &Matrix,
        ctx: &CrossContext<'_>,
        keep: bool,
    ) -> Result<(Matrix, CrossCache)> {
        let d = self.wq.rows;
        let q = apply_rotary(&h.matmul_t(&self.wq)?, ctx.n_heads, &ctx.rope.query_positions)?;
        let kv = if h_img.rows == 0 {
            Matrix::zeros(0, 2 * d)
        } else {
            h_img.matmul_t(&self.w_kv)?
        };
        let key_positions = ctx.rope.patch_positions(ctx.patches);
        let k = apply_rotary(&kv.columns(0, d), ctx.n_heads, &key_positions)?;
        let v = kv.columns(d, d);
        let mask = KeyMask::Slots {
            mask: ctx.mask,
            patches: ctx.patches,
        };
        let attn = attend(&q, &k, &v, ctx.n_heads, mask, keep)?;
        let c = attn.out.matmul_t(&self.wo)?;
        let gate: Vec<f64> = (0..h.rows).map(|t| sigmoid(dot(&self.w_gate, h.row(t)))).collect();
        let mut out = h.clone();
        for t in 0..h.rows {
            if attn.bypass[t] {
                continue;
            }
            for (o, cv) in out.row_mut(t).iter_mut().zip(c.row(t)) {
                *o += gate[t] * cv;
            }
        }
        let cache = CrossCache {
            h_in: h.clone(),
            h_img: h_img.clone(),
            q,
            k,
            v,
            key_positions,
            attn,
            c,
            gate,
        };
        Ok((out, cache))
    }

    /// Returns `(d h, d h_img)` and accumulates parameter gradients.
    pub fn backward(
        &self,
        cache: &CrossCache,
        ctx: &CrossContext<'_>,
        d_out: &Matrix,
        grad: &mut CrossSublayer,
    ) -> Result<(Matrix, Matrix)> {
        let (l, d) = (d_out.rows, d_out.cols);
        let mut dh = d_out.clone();
        let mut dc = Matrix::zeros(l, d);
        for t in 0..l {
            if cache.attn.bypass[t] {
                continue;
            }
            let g = cache.gate[t];
            let go = d_out.row(t);
            let dz = dot(go, cache.c.row(t)) * g * (1.0 - g);
            for j in 0..d {
                dc.row_mut(t)[j] = g * go[j];
                dh.row_mut(t)[j] += dz * self.w_gate[j];
                grad.w_gate[j] += dz * cache.h_in.row(t)[j];
            }
        }
        grad.wo.add_assign(&dc.t_matmul(&cache.attn.out)?);
        let da = dc.matmul(&self.wo)?;
        let g = attend_backward(&cache.q, &cache.k, &cache.v, &cache.attn, &da)?;
        let dq = apply_rotary_inverse(&g.dq, ctx.n_heads, &ctx.rope.query_positions)?;
        grad.wq.add_assign(&dq.t_matmul(&cache.h_in)?);
        dh.add_assign(&dq.matmul(&self.wq)?);
        let dk = apply_rotary_inverse(&g.dk, ctx.n_heads, &cache.key_positions)?;
        let dkv = Matrix::hcat(&dk, &g.dv);
        grad.w_kv.add_assign(&dkv.t_matmul(&cache.h_img)?);
        let dimg = dkv.matmul(&self.w_kv)?;
        Ok((dh, dimg))
    }
}

impl Params for CrossSublayer {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        visit_matrix(prefix, "wq", &self.wq, f);
        visit_matrix(prefix, "w_kv", &self.w_kv, f);
        visit_matrix(prefix, "wo", &self.wo, f);
        f(&join(prefix, "w_gate"), &[self.w_gate.len()], &self.w_gate);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        visit_matrix_mut(prefix, "wq", &mut self.wq, f);
        visit_matrix_mut(prefix, "w_kv", &mut self.w_kv, f);
        visit_matrix_mut(prefix, "wo", &mut self.wo, f);
        let n = self.w_gate.len();
        f(&join(prefix, "w_gate"), &[n], &mut self.w_gate);
    }
}
