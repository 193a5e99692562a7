//! Scalar triple-loop references. Nothing here calls the main path's
//! matmul, rotary, attention, layernorm or fusion code.

use crate::hyperattention::layers::LN_EPS;
use crate::hyperattention::{HatbParams, HostBlock};
use crate::interleave::{CrossAttentionMask, RotaryPositionMap};
use crate::model::{Example, Fusion, Model, Variant};
use crate::tensor::Matrix;

pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &Matrix) -> Rows {
    (0..m.rows)
        .map(|i| (0..m.cols).map(|j| m.data[i * m.cols + j]).collect())
        .collect()
}

pub fn from_rows(r: &Rows, cols: usize) -> Matrix {
    let mut data = Vec::with_capacity(r.len() * cols);
    for row in r {
        data.extend(row.iter().copied());
    }
    Matrix {
        rows: r.len(),
        cols,
        data,
    }
}

/// `y[i][o] = Σ_k x[i][k] · w[o][k]`, reading the weight buffer directly.
fn linear(x: &Rows, w: &Matrix) -> Rows {
    let mut y = vec![vec![0.0; w.rows]; x.len()];
    for i in 0..x.len() {
        for o in 0..w.rows {
            let mut s = 0.0;
            for k in 0..w.cols {
                s += x[i][k] * w.data[o * w.cols + k];
            }
            y[i][o] = s;
        }
    }
    y
}

fn layer_norm(x: &Rows, gamma: &[f64], beta: &[f64]) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mut mean = 0.0;
            for v in row {
                mean += v;
            }
            mean /= n;
            let mut var = 0.0;
            for v in row {
                var += (v - mean) * (v - mean);
            }
            var /= n;
            let denom = (var + LN_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / denom * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

fn rope(x: &Rows, n_heads: usize, positions: &[usize]) -> Rows {
    let mut out = x.clone();
    for (r, row) in out.iter_mut().enumerate() {
        let head_dim = row.len() / n_heads;
        for h in 0..n_heads {
            for i in 0..head_dim / 2 {
                let theta = positions[r] as f64 / 10_000f64.powf(2.0 * i as f64 / head_dim as f64);
                let a = h * head_dim + 2 * i;
                let (x0, x1) = (x[r][a], x[r][a + 1]);
                row[a] = x0 * theta.cos() - x1 * theta.sin();
                row[a + 1] = x0 * theta.sin() + x1 * theta.cos();
            }
        }
    }
    out
}

/// Output of [`dense_attention_reference`].
#[derive(Debug, Clone)]
pub struct DenseAttention {
    pub out: Rows,
    /// `probs[t][h][j]`, zero where masked.
    pub probs: Vec<Vec<Vec<f64>>>,
    pub bypass: Vec<bool>,
}

/// Scalar multi-head attention with rotary applied to unrotated `q` and `k`.
///
/// `positions_k = None` leaves keys unrotated. `visible[t][j]` selects keys.
pub fn dense_attention_reference(
    q: &Rows,
    k: &Rows,
    v: &Rows,
    n_heads: usize,
    positions_q: &[usize],
    positions_k: Option<&[usize]>,
    visible: &[Vec<bool>],
) -> DenseAttention {
    let q = rope(q, n_heads, positions_q);
    let k = match positions_k {
        Some(p) => rope(k, n_heads, p),
        None => k.clone(),
    };
    let d = q.first().map_or(0, Vec::len);
    let head_dim = d / n_heads.max(1);
    let mut out = vec![vec![0.0; d]; q.len()];
    let mut probs = vec![vec![vec![0.0; k.len()]; n_heads]; q.len()];
    let mut bypass = vec![false; q.len()];
    for t in 0..q.len() {
        if !visible[t].iter().any(|&b| b) {
            bypass[t] = true;
            continue;
        }
        for h in 0..n_heads {
            let mut scores = vec![f64::NEG_INFINITY; k.len()];
            let mut max = f64::NEG_INFINITY;
            for j in 0..k.len() {
                if visible[t][j] {
                    let mut s = 0.0;
                    for c in 0..head_dim {
                        s += q[t][h * head_dim + c] * k[j][h * head_dim + c];
                    }
                    scores[j] = s / (head_dim as f64).sqrt();
                    if scores[j] > max {
                        max = scores[j];
                    }
                }
            }
            let mut total = 0.0;
            for j in 0..k.len() {
                if visible[t][j] {
                    total += (scores[j] - max).exp();
                }
            }
            for j in 0..k.len() {
                if visible[t][j] {
                    let p = (scores[j] - max).exp() / total;
                    probs[t][h][j] = p;
                    for c in 0..head_dim {
                        out[t][h * head_dim + c] += p * v[j][h * head_dim + c];
                    }
                }
            }
        }
    }
    DenseAttention { out, probs, bypass }
}

pub fn causal_visibility(n: usize) -> Vec<Vec<bool>> {
    (0..n).map(|t| (0..n).map(|j| j <= t).collect()).collect()
}

pub fn patch_visibility(mask: &CrossAttentionMask, patches: usize) -> Vec<Vec<bool>> {
    (0..mask.text_len)
        .map(|t| {
            (0..mask.num_slots * patches)
                .map(|j| mask.visible[t * mask.num_slots + j / patches])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn ffn_tail(host: &HostBlock, x1: &Rows) -> Rows {
    let n2 = layer_norm(x1, &host.ln2.gamma, &host.ln2.beta);
    let mut u = linear(&n2, &host.w1);
    for row in &mut u {
        for (j, v) in row.iter_mut().enumerate() {
            *v = gelu(*v + host.b1[j]);
        }
    }
    let y = linear(&u, &host.w2);
    x1.iter()
        .zip(&y)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .enumerate()
                .map(|(j, (p, q))| p + q + host.b2[j])
                .collect()
        })
        .collect()
}

/// Reference values of one HATB evaluation.
#[derive(Debug, Clone)]
pub struct ReferenceHatb {
    pub out: Rows,
    pub h_self: Rows,
    pub h_cross: Rows,
    pub h_fused: Rows,
    pub gate: Vec<f64>,
    pub self_probs: Vec<Vec<Vec<f64>>>,
    pub cross_probs: Vec<Vec<Vec<f64>>>,
}

/// Straight-line HATB: every step written out with scalar loops.
pub fn hatb_reference(
    h_text: &Matrix,
    h_img: &Matrix,
    patches: usize,
    rope_map: &RotaryPositionMap,
    mask: &CrossAttentionMask,
    host: &HostBlock,
    params: &HatbParams,
) -> ReferenceHatb {
    let x = to_rows(h_text);
    let img = to_rows(h_img);
    let heads = host.n_heads;
    let d = host.wq.rows;
    let n = layer_norm(&x, &host.ln1.gamma, &host.ln1.beta);
    let n_img = match &params.img_norm {
        Some(ln) => layer_norm(&img, &ln.gamma, &ln.beta),
        None => layer_norm(&img, &host.ln1.gamma, &host.ln1.beta),
    };
    let q = linear(&n, &host.wq);
    let k = linear(&n, &host.wk);
    let v = linear(&n, &host.wv);
    let kv = linear(&n_img, &params.w_kv_img);
    let k_img: Rows = kv.iter().map(|r| r[..d].to_vec()).collect();
    let v_img: Rows = kv.iter().map(|r| r[d..].to_vec()).collect();

    let pos = &rope_map.query_positions;
    let self_attn = dense_attention_reference(&q, &k, &v, heads, pos, Some(pos), &causal_visibility(x.len()));
    let key_pos: Vec<usize> = rope_map
        .visual_key_positions
        .iter()
        .flat_map(|&p| std::iter::repeat_n(p, patches))
        .collect();
    let cross = dense_attention_reference(
        &q,
        &k_img,
        &v_img,
        heads,
        pos,
        params.options.mi_rope.then_some(key_pos.as_slice()),
        &patch_visibility(mask, patches),
    );
    let h_self = linear(&self_attn.out, &host.wo);
    let h_cross = linear(&cross.out, &host.wo);

    let mut gate = Vec::new();
    let mut h_fused = h_self.clone();
    for t in 0..x.len() {
        let g = if params.options.adaptive_gate {
            let mut z = params.gate_bias.first().copied().unwrap_or(0.0);
            for j in 0..d {
                z += params.w_gate[j] * h_self[t][j];
            }
            let g = 1.0 / (1.0 + (-z).exp());
            gate.push(g);
            Some(g)
        } else {
            None
        };
        if cross.bypass[t] {
            continue;
        }
        for j in 0..d {
            h_fused[t][j] = match g {
                Some(g) => h_cross[t][j] * g + h_self[t][j] * (1.0 - g),
                None => h_self[t][j] + h_cross[t][j],
            };
        }
    }
    let x1: Rows = x
        .iter()
        .zip(&h_fused)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect();
    ReferenceHatb {
        out: ffn_tail(host, &x1),
        h_self,
        h_cross,
        h_fused,
        gate,
        self_probs: self_attn.probs,
        cross_probs: cross.probs,
    }
}

/// Straight-line standard block.
pub fn block_reference(h_text: &Matrix, positions: &[usize], host: &HostBlock) -> Rows {
    let x = to_rows(h_text);
    let n = layer_norm(&x, &host.ln1.gamma, &host.ln1.beta);
    let q = linear(&n, &host.wq);
    let k = linear(&n, &host.wk);
    let v = linear(&n, &host.wv);
    let attn = dense_attention_reference(
        &q,
        &k,
        &v,
        host.n_heads,
        positions,
        Some(positions),
        &causal_visibility(x.len()),
    );
    let h = linear(&attn.out, &host.wo);
    let x1: Rows = x
        .iter()
        .zip(&h)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect();
    ffn_tail(host, &x1)
}

/// Straight-line evaluation of a hyper-variant model: embedding lookup,
/// scalar vision projection, reference blocks and HATBs, final norm and head.
///
/// Returns `(hidden, logits)` at the text positions, or `None` for other variants.
pub fn model_reference(model: &Model, ex: &Example) -> Option<(Rows, Rows)> {
    let cfg = &model.config;
    if cfg.variant != Variant::Hyper {
        return None;
    }
    let w = &model.weights;
    let d = cfg.hidden_dim;
    let mut x: Rows = ex
        .seq
        .tokens
        .iter()
        .map(|&t| (0..d).map(|j| w.embed.data[t as usize * d + j]).collect())
        .collect();
    let mut img = linear(&to_rows(&ex.features), &w.vision_proj);
    for row in &mut img {
        for (j, v) in row.iter_mut().enumerate() {
            *v += w.vision_bias[j];
        }
    }
    let img = from_rows(&img, d);
    let rope_map = RotaryPositionMap {
        query_positions: (0..x.len()).collect(),
        visual_key_positions: ex.seq.slots.iter().map(|s| s.placeholder_position).collect(),
    };
    let positions = rope_map.query_positions.clone();
    let mask = CrossAttentionMask::from_positions(x.len(), &rope_map.visual_key_positions);
    for (host, fusion) in w.blocks.iter().zip(&w.fusion) {
        let h = from_rows(&x, d);
        x = match fusion {
            Fusion::Hatb(p) => hatb_reference(&h, &img, cfg.patches_per_slot, &rope_map, &mask, host, p).out,
            _ => block_reference(&h, &positions, host),
        };
    }
    let normed = layer_norm(&x, &w.ln_f.gamma, &w.ln_f.beta);
    let logits = linear(&normed, &w.head);
    Some((x, logits))
}
