//! Hyper attention transformer block.
//!
//! A HATB runs the host block's causal self-attention and a masked
//! text-to-image cross-attention side by side, off one shared input
//! layernorm and one set of text queries:
//!
//! ```text
//! n_text, n_img   = LN1(h_text), LN1(h_img)
//! q               = rope(n_text Wqᵀ, token positions)
//! [K_img; V_img]  = n_img W_kv_imgᵀ            (W_kv_img: [2D × D])
//! h_self          = Wo · attn(q, rope(K_text), V_text, causal)
//! h_cross         = Wo · attn(q, rope(K_img, placeholder positions), V_img, cross mask)
//! g               = sigmoid(w_gate · h_self)   (one scalar per token)
//! h_fused         = h_cross · g + h_self · (1 - g)
//! out             = x1 + MLP(LN2(x1)),  x1 = h_text + h_fused
//! ```
//!
//! Tokens that see no image skip fusion entirely (`h_fused = h_self`), which
//! makes a text-only HATB bitwise equal to the host block.

use serde::{Deserialize, Serialize};

use super::attention::{attend, attend_backward, AttentionOut, KeyMask};
use super::block::{FfnCache, HostBlock, SelfAttnCache};
use super::layers::{join, sigmoid, visit_matrix, visit_matrix_mut, LayerNorm, LnCache, Params, Visit, VisitMut};
use super::rotary::{apply_rotary, apply_rotary_inverse};
use crate::error::{shape_err, Error, Result};
use crate::interleave::{build_cross_mask, build_rope_map, CrossAttentionMask, InterleavedSequence, RotaryPositionMap};
use crate::tensor::{dot, Matrix};

/// Structural switches used by the ablations. Defaults give the full block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HatbOptions {
    pub adaptive_gate: bool,
    pub shared_layernorm: bool,
    pub mi_rope: bool,
    pub gate_bias: bool,
}

impl Default for HatbOptions {
    fn default() -> Self {
        Self {
            adaptive_gate: true,
            shared_layernorm: true,
            mi_rope: true,
            gate_bias: false,
        }
    }
}

/// Parameters a HATB adds on top of its host block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HatbParams {
    pub options: HatbOptions,
    /// Stacked visual key and value projection, `[2D × D]`.
    pub w_kv_img: Matrix,
    /// `[D]`; empty when adaptive gating is off.
    pub w_gate: Vec<f64>,
    /// `[1]` when the gate bias is enabled, otherwise empty.
    pub gate_bias: Vec<f64>,
    /// Separate visual layernorm, present only without the shared layernorm.
    pub img_norm: Option<LayerNorm>,
}

impl HatbParams {
    /// Visual KV starts as a copy of the host's K and V projections; the gate starts at zero.
    pub fn from_host(host: &HostBlock, options: HatbOptions) -> Self {
        let d = host.dim();
        Self {
            options,
            w_kv_img: Matrix::vcat(&host.wk, &host.wv),
            w_gate: if options.adaptive_gate {
                vec![0.0; d]
            } else {
                Vec::new()
            },
            gate_bias: if options.adaptive_gate && options.gate_bias {
                vec![0.0]
            } else {
                Vec::new()
            },
            img_norm: (!options.shared_layernorm).then(|| LayerNorm::new(d)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    fn bias(&self) -> f64 {
        self.gate_bias.first().copied().unwrap_or(0.0)
    }
}

impl Params for HatbParams {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        visit_matrix(prefix, "w_kv_img", &self.w_kv_img, f);
        if !self.w_gate.is_empty() {
            f(&join(prefix, "w_gate"), &[self.w_gate.len()], &self.w_gate);
        }
        if !self.gate_bias.is_empty() {
            f(&join(prefix, "gate_bias"), &[1], &self.gate_bias);
        }
        if let Some(ln) = &self.img_norm {
            ln.visit(&join(prefix, "img_norm"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        visit_matrix_mut(prefix, "w_kv_img", &mut self.w_kv_img, f);
        if !self.w_gate.is_empty() {
            let n = self.w_gate.len();
            f(&join(prefix, "w_gate"), &[n], &mut self.w_gate);
        }
        if !self.gate_bias.is_empty() {
            f(&join(prefix, "gate_bias"), &[1], &mut self.gate_bias);
        }
        if let Some(ln) = &mut self.img_norm {
            ln.visit_mut(&join(prefix, "img_norm"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionInputs {
    /// `[L × D]` text hidden states entering the block.
    pub h_text: Matrix,
    /// `[M × D]` visual features, `patches_per_slot` consecutive rows per slot.
    pub h_img: Matrix,
    pub patches_per_slot: usize,
    pub rope: RotaryPositionMap,
    pub cross_mask: CrossAttentionMask,
}

impl AttentionInputs {
    pub fn from_sequence(
        h_text: Matrix,
        h_img: Matrix,
        seq: &InterleavedSequence,
        patches_per_slot: usize,
    ) -> Result<Self> {
        let inputs = Self {
            h_text,
            h_img,
            patches_per_slot,
            rope: build_rope_map(seq),
            cross_mask: build_cross_mask(seq),
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.h_text.rows;
        let slots = self.cross_mask.num_slots;
        if self.h_img.rows != slots * self.patches_per_slot {
            return Err(shape_err(
                "h_img rows",
                &[slots * self.patches_per_slot],
                &[self.h_img.rows],
            ));
        }
        if self.h_img.rows > 0 && self.h_img.cols != self.h_text.cols {
            return Err(shape_err("h_img width", &[self.h_text.cols], &[self.h_img.cols]));
        }
        if self.cross_mask.text_len != l || self.rope.query_positions.len() != l {
            return Err(shape_err("text length", &[l], &[self.cross_mask.text_len]));
        }
        if self.rope.visual_key_positions.len() != slots {
            return Err(shape_err(
                "visual key positions",
                &[slots],
                &[self.rope.visual_key_positions.len()],
            ));
        }
        Ok(())
    }

    pub fn key_mask(&self) -> KeyMask<'_> {
        KeyMask::Slots {
            mask: &self.cross_mask,
            patches: self.patches_per_slot,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HatbOutput {
    /// Block output after both residual adds and the FFN.
    pub out: Matrix,
    pub h_fused: Matrix,
    pub h_self: Matrix,
    pub h_cross: Matrix,
    /// One value per token; empty when adaptive gating is disabled.
    pub gate: Vec<f64>,
    /// Tokens whose cross-attention row was empty.
    pub bypass: Vec<bool>,
}

/// Activations kept for [`hatb_backward`].
#[derive(Debug, Clone)]
pub struct HatbCache {
    pub sa: SelfAttnCache,
    pub n_img: Matrix,
    pub img_ln: LnCache,
    pub k_img_rot: Matrix,
    pub v_img: Matrix,
    pub key_positions: Vec<usize>,
    pub cross: AttentionOut,
    pub ffn: FfnCache,
}

#[derive(Debug, Clone)]
pub struct HatbGrads {
    pub host: HostBlock,
    pub hatb: HatbParams,
    pub h_text: Matrix,
    pub h_img: Matrix,
}

/// Normalizes both streams with the same layernorm.
pub fn shared_layernorm(h_text: &Matrix, h_img: &Matrix, ln: &LayerNorm) -> Result<(Matrix, Matrix)> {
    let (t, _) = ln.forward(h_text)?;
    let (i, _) = ln.forward(h_img)?;
    Ok((t, i))
}

/// `[K_img | V_img] = n_img · W_kv_imgᵀ`, split into halves.
pub fn project_visual_kv(n_img: &Matrix, w_kv_img: &Matrix) -> Result<(Matrix, Matrix)> {
    if w_kv_img.rows != 2 * w_kv_img.cols || (n_img.rows > 0 && n_img.cols != w_kv_img.cols) {
        return Err(shape_err("w_kv_img", &[2 * n_img.cols, n_img.cols], &w_kv_img.shape()));
    }
    let d = w_kv_img.cols;
    let kv = if n_img.rows == 0 {
        Matrix::zeros(0, 2 * d)
    } else {
        n_img.matmul_t(w_kv_img)?
    };
    Ok((kv.columns(0, d), kv.columns(d, d)))
}

pub struct CrossAttention {
    /// `[L × D]` after the host output projection; zero rows where bypassed.
    pub h_cross: Matrix,
    pub attn: AttentionOut,
    pub k_rot: Matrix,
    pub key_positions: Vec<usize>,
}

/// Masked cross-attention of the (already rotated) text queries over the
/// visual keys, which are rotated here with their placeholder positions.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention(
    q_text: &Matrix,
    k_img: &Matrix,
    v_img: &Matrix,
    rope: &RotaryPositionMap,
    cross_mask: &CrossAttentionMask,
    patches_per_slot: usize,
    host: &HostBlock,
    mi_rope: bool,
    keep: bool,
) -> Result<CrossAttention> {
    let key_positions = rope.patch_positions(patches_per_slot);
    if key_positions.len() != k_img.rows {
        return Err(shape_err("visual keys", &[key_positions.len()], &[k_img.rows]));
    }
    let k_rot = if mi_rope {
        apply_rotary(k_img, host.n_heads, &key_positions)?
    } else {
        k_img.clone()
    };
    let mask = KeyMask::Slots {
        mask: cross_mask,
        patches: patches_per_slot,
    };
    let attn = attend(q_text, &k_rot, v_img, host.n_heads, mask, keep)?;
    let h_cross = attn.out.matmul_t(&host.wo)?;
    Ok(CrossAttention {
        h_cross,
        attn,
        k_rot,
        key_positions,
    })
}

/// `gate[t] = sigmoid(w_gate · h_self[t] + bias)`.
pub fn adaptive_gate(h_self: &Matrix, w_gate: &[f64], bias: f64) -> Result<Vec<f64>> {
    if w_gate.len() != h_self.cols {
        return Err(shape_err("w_gate", &[h_self.cols], &[w_gate.len()]));
    }
    Ok((0..h_self.rows)
        .map(|t| sigmoid(dot(w_gate, h_self.row(t)) + bias))
        .collect())
}

/// `h_cross · g + h_self · (1 - g)` per token; bypassed tokens keep `h_self`.
pub fn fuse(h_cross: &Matrix, h_self: &Matrix, gate: &[f64], bypass: &[bool]) -> Result<Matrix> {
    if h_cross.shape() != h_self.shape() || gate.len() != h_self.rows || bypass.len() != h_self.rows {
        return Err(shape_err("fuse", &h_self.shape(), &h_cross.shape()));
    }
    let mut out = h_self.clone();
    for t in 0..h_self.rows {
        if bypass[t] {
            continue;
        }
        let g = gate[t];
        if !(g > 0.0 && g < 1.0) {
            return Err(Error::GateOutOfRange { token: t, value: g });
        }
        for ((o, c), s) in out.row_mut(t).iter_mut().zip(h_cross.row(t)).zip(h_self.row(t)) {
            *o = c * g + s * (1.0 - g);
        }
    }
    Ok(out)
}

/// Ungated fusion for the ablation without adaptive gating.
fn fuse_sum(h_cross: &Matrix, h_self: &Matrix, bypass: &[bool]) -> Matrix {
    let mut out = h_self.clone();
    for t in 0..h_self.rows {
        if !bypass[t] {
            for (o, c) in out.row_mut(t).iter_mut().zip(h_cross.row(t)) {
                *o += c;
            }
        }
    }
    out
}

pub fn hatb_forward(inputs: &AttentionInputs, host: &HostBlock, params: &HatbParams) -> Result<HatbOutput> {
    hatb_forward_cached(inputs, host, params, false).map(|(out, _)| out)
}

/// Forward pass; with `keep` the cache carries everything backward needs.
pub fn hatb_forward_cached(
    inputs: &AttentionInputs,
    host: &HostBlock,
    params: &HatbParams,
    keep: bool,
) -> Result<(HatbOutput, HatbCache)> {
    inputs.validate()?;
    let positions = &inputs.rope.query_positions;
    let (h_self, sa) = host.self_attention(&inputs.h_text, positions, keep)?;

    let img_ln = params.img_norm.as_ref().unwrap_or(&host.ln1);
    let h_img = if inputs.h_img.rows == 0 {
        Matrix::zeros(0, host.dim())
    } else {
        inputs.h_img.clone()
    };
    let (n_img, img_ln_cache) = img_ln.forward(&h_img)?;
    let (k_img, v_img) = project_visual_kv(&n_img, &params.w_kv_img)?;
    let cross = cross_attention(
        &sa.q,
        &k_img,
        &v_img,
        &inputs.rope,
        &inputs.cross_mask,
        inputs.patches_per_slot,
        host,
        params.options.mi_rope,
        keep,
    )?;
    let bypass = cross.attn.bypass.clone();

    let (gate, h_fused) = if params.options.adaptive_gate {
        let gate = adaptive_gate(&h_self, &params.w_gate, params.bias())?;
        let fused = fuse(&cross.h_cross, &h_self, &gate, &bypass)?;
        (gate, fused)
    } else {
        (Vec::new(), fuse_sum(&cross.h_cross, &h_self, &bypass))
    };

    let x1 = inputs.h_text.add(&h_fused);
    let (out, ffn) = host.ffn_residual(&x1)?;
    let cache = HatbCache {
        sa,
        n_img,
        img_ln: img_ln_cache,
        k_img_rot: cross.k_rot,
        v_img,
        key_positions: cross.key_positions,
        cross: cross.attn,
        ffn,
    };
    Ok((
        HatbOutput {
            out,
            h_fused,
            h_self,
            h_cross: cross.h_cross,
            gate,
            bypass,
        },
        cache,
    ))
}

/// Analytic gradients of `<upstream, out>` w.r.t. every parameter and both input streams.
pub fn hatb_backward(
    inputs: &AttentionInputs,
    host: &HostBlock,
    params: &HatbParams,
    output: &HatbOutput,
    cache: &HatbCache,
    upstream: &Matrix,
) -> Result<HatbGrads> {
    if upstream.shape() != output.out.shape() {
        return Err(shape_err("upstream gradient", &output.out.shape(), &upstream.shape()));
    }
    if cache.cross.probs.is_none() || cache.sa.attn.probs.is_none() {
        return Err(Error::MissingCache("forward was run without keeping activations"));
    }
    let (l, d) = (inputs.h_text.rows, host.dim());
    let mut g_host = host.zeros_like();
    let mut g_hatb = params.zeros_like();

    let dx1 = host.ffn_residual_backward(&cache.ffn, upstream, &mut g_host)?;

    let mut dh_self = Matrix::zeros(l, d);
    let mut dh_cross = Matrix::zeros(l, d);
    for t in 0..l {
        let g_out = dx1.row(t);
        if output.bypass[t] {
            dh_self.row_mut(t).copy_from_slice(g_out);
            continue;
        }
        if !params.options.adaptive_gate {
            dh_self.row_mut(t).copy_from_slice(g_out);
            dh_cross.row_mut(t).copy_from_slice(g_out);
            continue;
        }
        let g = output.gate[t];
        let (hs, hc) = (output.h_self.row(t), output.h_cross.row(t));
        let dg: f64 = g_out.iter().zip(hc.iter().zip(hs)).map(|(o, (c, s))| o * (c - s)).sum();
        let dz = dg * g * (1.0 - g);
        for j in 0..d {
            dh_cross.row_mut(t)[j] = g * g_out[j];
            dh_self.row_mut(t)[j] = (1.0 - g) * g_out[j] + dz * params.w_gate[j];
            g_hatb.w_gate[j] += dz * hs[j];
        }
        if let Some(b) = g_hatb.gate_bias.first_mut() {
            *b += dz;
        }
    }

    let sa = &cache.sa;
    g_host.wo.add_assign(&dh_self.t_matmul(&sa.attn.out)?);
    g_host.wo.add_assign(&dh_cross.t_matmul(&cache.cross.out)?);
    let gs = attend_backward(&sa.q, &sa.k, &sa.v, &sa.attn, &dh_self.matmul(&host.wo)?)?;
    let gc = attend_backward(
        &sa.q,
        &cache.k_img_rot,
        &cache.v_img,
        &cache.cross,
        &dh_cross.matmul(&host.wo)?,
    )?;

    let dq = gs.dq.add(&gc.dq);
    let mut dx = host.qkv_backward(sa, &inputs.rope.query_positions, &dq, &gs.dk, &gs.dv, &mut g_host)?;
    dx.add_assign(&dx1);

    let dk_img = if params.options.mi_rope {
        apply_rotary_inverse(&gc.dk, host.n_heads, &cache.key_positions)?
    } else {
        gc.dk
    };
    let dkv = Matrix::hcat(&dk_img, &gc.dv);
    g_hatb.w_kv_img.add_assign(&dkv.t_matmul(&cache.n_img)?);
    let dn_img = dkv.matmul(&params.w_kv_img)?;
    let dh_img = match (&params.img_norm, &mut g_hatb.img_norm) {
        (Some(ln), Some(g)) => ln.backward(&cache.img_ln, &dn_img, g),
        _ => host.ln1.backward(&cache.img_ln, &dn_img, &mut g_host.ln1),
    };

    Ok(HatbGrads {
        host: g_host,
        hatb: g_hatb,
        h_text: dx,
        h_img: dh_img,
    })
}
