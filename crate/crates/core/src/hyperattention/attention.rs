//! Multi-head scaled dot-product attention over pre-rotated queries and keys.

use crate::error::{shape_err, Result};
use crate::exec;
use crate::interleave::CrossAttentionMask;
use crate::tensor::{dot, Matrix};

/// Which keys each query row may see.
#[derive(Debug, Clone, Copy)]
pub enum KeyMask<'a> {
    /// Key `j` is visible to query `t` iff `j <= t`.
    Causal,
    /// Keys come in groups of `patches` per image slot; the group of slot `s`
    /// is visible to query `t` iff `mask.is_visible(t, s)`.
    Slots {
        mask: &'a CrossAttentionMask,
        patches: usize,
    },
}

impl KeyMask<'_> {
    fn visible_keys(&self, t: usize, n_keys: usize) -> Vec<usize> {
        match *self {
            KeyMask::Causal => (0..(t + 1).min(n_keys)).collect(),
            KeyMask::Slots { mask, patches } => mask
                .row(t)
                .iter()
                .enumerate()
                .filter(|(_, &v)| v)
                .flat_map(|(s, _)| s * patches..(s + 1) * patches)
                .collect(),
        }
    }

    fn check(&self, n_queries: usize, n_keys: usize) -> Result<()> {
        if let KeyMask::Slots { mask, patches } = *self {
            if mask.text_len != n_queries || mask.num_slots * patches != n_keys {
                return Err(shape_err(
                    "cross-attention mask",
                    &[n_queries, n_keys],
                    &[mask.text_len, mask.num_slots * patches],
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOut {
    /// Heads concatenated, before the output projection: `[L × D]`.
    pub out: Matrix,
    /// Rows whose mask admitted no key; their output row is zero.
    pub bypass: Vec<bool>,
    /// Probabilities laid out `[query][head][key]`, kept for backward.
    pub probs: Option<Vec<f64>>,
    pub n_keys: usize,
    pub n_heads: usize,
}

impl AttentionOut {
    pub fn prob(&self, t: usize, h: usize, j: usize) -> Option<f64> {
        self.probs.as_ref().map(|p| p[(t * self.n_heads + h) * self.n_keys + j])
    }
}

pub fn attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    n_heads: usize,
    mask: KeyMask<'_>,
    keep_probs: bool,
) -> Result<AttentionOut> {
    if k.shape() != v.shape() || q.cols != k.cols {
        return Err(shape_err("attention k/v", &q.shape(), &k.shape()));
    }
    mask.check(q.rows, k.rows)?;
    let d = q.cols;
    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let m = k.rows;
    let rows = exec::map_indices(q.rows, |t| {
        let keys = mask.visible_keys(t, m);
        let mut out = vec![0.0; d];
        let mut probs = if keep_probs { vec![0.0; n_heads * m] } else { Vec::new() };
        if keys.is_empty() {
            return (out, probs, true);
        }
        let qrow = q.row(t);
        let mut p = vec![0.0; keys.len()];
        for h in 0..n_heads {
            let span = h * head_dim..(h + 1) * head_dim;
            let qh = &qrow[span.clone()];
            let mut max = f64::NEG_INFINITY;
            for (pi, &j) in p.iter_mut().zip(&keys) {
                *pi = dot(qh, &k.row(j)[span.clone()]) * scale;
                max = max.max(*pi);
            }
            let mut sum = 0.0;
            for pi in p.iter_mut() {
                *pi = (*pi - max).exp();
                sum += *pi;
            }
            let oh = &mut out[span.clone()];
            for (pi, &j) in p.iter_mut().zip(&keys) {
                *pi /= sum;
                for (o, vv) in oh.iter_mut().zip(&v.row(j)[span.clone()]) {
                    *o += *pi * vv;
                }
                if keep_probs {
                    probs[h * m + j] = *pi;
                }
            }
        }
        (out, probs, false)
    });
    let mut out = Matrix::zeros(q.rows, d);
    let mut bypass = Vec::with_capacity(q.rows);
    let mut probs = keep_probs.then(|| Vec::with_capacity(q.rows * n_heads * m));
    for (t, (row, p, b)) in rows.into_iter().enumerate() {
        out.row_mut(t).copy_from_slice(&row);
        bypass.push(b);
        if let Some(all) = probs.as_mut() {
            all.extend_from_slice(&p);
        }
    }
    Ok(AttentionOut {
        out,
        bypass,
        probs,
        n_keys: m,
        n_heads,
    })
}

pub struct AttentionGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

/// Backward of [`attend`] given the upstream gradient of the concatenated heads.
pub fn attend_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    fwd: &AttentionOut,
    d_out: &Matrix,
) -> Result<AttentionGrads> {
    let probs = fwd
        .probs
        .as_ref()
        .ok_or(crate::error::Error::MissingCache("attention probabilities"))?;
    let (n_heads, m, d) = (fwd.n_heads, fwd.n_keys, q.cols);
    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let p_at = |t: usize, h: usize| &probs[(t * n_heads + h) * m..(t * n_heads + h + 1) * m];

    // dS[t][h][j] = P (dP - sum_j P dP), with dP = dO . v
    let ds_rows = exec::map_indices(q.rows, |t| {
        let mut ds = vec![0.0; n_heads * m];
        if fwd.bypass[t] {
            return ds;
        }
        let go = d_out.row(t);
        for h in 0..n_heads {
            let span = h * head_dim..(h + 1) * head_dim;
            let p = p_at(t, h);
            let dsh = &mut ds[h * m..(h + 1) * m];
            let mut acc = 0.0;
            for j in 0..m {
                if p[j] != 0.0 {
                    dsh[j] = dot(&go[span.clone()], &v.row(j)[span.clone()]);
                    acc += p[j] * dsh[j];
                }
            }
            for j in 0..m {
                dsh[j] = p[j] * (dsh[j] - acc);
            }
        }
        ds
    });

    let mut dq = Matrix::zeros(q.rows, d);
    exec::for_each_row(&mut dq.data, d, m * d, |t, row| {
        let ds = &ds_rows[t];
        for h in 0..n_heads {
            for j in 0..m {
                let g = ds[h * m + j];
                if g != 0.0 {
                    let kr = &k.row(j)[h * head_dim..(h + 1) * head_dim];
                    for (o, kv) in row[h * head_dim..(h + 1) * head_dim].iter_mut().zip(kr) {
                        *o += g * kv * scale;
                    }
                }
            }
        }
    });

    let mut dk = Matrix::zeros(m, d);
    exec::for_each_row(&mut dk.data, d, q.rows * d, |j, row| {
        for (t, ds) in ds_rows.iter().enumerate() {
            for h in 0..n_heads {
                let g = ds[h * m + j];
                if g != 0.0 {
                    let qr = &q.row(t)[h * head_dim..(h + 1) * head_dim];
                    for (o, qv) in row[h * head_dim..(h + 1) * head_dim].iter_mut().zip(qr) {
                        *o += g * qv * scale;
                    }
                }
            }
        }
    });

    let mut dv = Matrix::zeros(m, d);
    exec::for_each_row(&mut dv.data, d, q.rows * d, |j, row| {
        for t in 0..q.rows {
            if fwd.bypass[t] {
                continue;
            }
            let go = d_out.row(t);
            for h in 0..n_heads {
                let p = p_at(t, h)[j];
                if p != 0.0 {
                    let span = h * head_dim..(h + 1) * head_dim;
                    for (o, g) in row[span.clone()].iter_mut().zip(&go[span]) {
                        *o += p * g;
                    }
                }
            }
        }
    });

    Ok(AttentionGrads { dq, dk, dv })
}
