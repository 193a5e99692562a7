//! A tiny decoder-only language model with pluggable visual fusion.

pub mod config;
pub mod cross;
pub mod vision;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::fixtures::{collect_params, load_params, read_tensors, write_tensors};
use crate::hyperattention::block::{BlockCache, MlpCache, SelfAttnCache};
use crate::hyperattention::layers::{join, visit_matrix, visit_matrix_mut, LnCache, Visit, VisitMut};
use crate::hyperattention::{
    hatb_backward, hatb_forward_cached, AttentionInputs, HatbCache, HatbOutput, HatbParams, HostBlock, LayerNorm,
    Params,
};
use crate::interleave::{build_cross_mask, build_rope_map, InterleavedSequence};
use crate::tensor::{add_vec, Matrix};

pub use config::{default_hatb_indices, ModelConfig, Variant};
pub use cross::{CrossCache, CrossContext, CrossSublayer};
pub use vision::{encode_images_stub, features_for_sequence, Descriptor};

/// The fusion module attached to one layer, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Fusion {
    None,
    Hatb(HatbParams),
    Cross(CrossSublayer),
}

impl Fusion {
    fn zeros_like(&self) -> Self {
        match self {
            Fusion::None => Fusion::None,
            Fusion::Hatb(p) => Fusion::Hatb(p.zeros_like()),
            Fusion::Cross(c) => Fusion::Cross(c.zeros_like()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    /// `[vocab × D]`
    pub embed: Matrix,
    /// Linear projection of raw visual features, `[D × vision_dim]`.
    pub vision_proj: Matrix,
    pub vision_bias: Vec<f64>,
    pub blocks: Vec<HostBlock>,
    pub fusion: Vec<Fusion>,
    pub ln_f: LayerNorm,
    /// `[vocab × D]`
    pub head: Matrix,
}

impl ModelWeights {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fusion = self.fusion.iter().map(Fusion::zeros_like).collect();
        z.zero();
        z
    }

    fn visit_base(&self, f: &mut Visit<'_>) {
        visit_matrix("", "embed", &self.embed, f);
        visit_matrix("", "vision_proj", &self.vision_proj, f);
        f("vision_bias", &[self.vision_bias.len()], &self.vision_bias);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("layers.{i}"), f);
        }
        self.ln_f.visit("ln_f", f);
        visit_matrix("", "head", &self.head, f);
    }

    fn visit_fusion(&self, f: &mut Visit<'_>) {
        for (i, fu) in self.fusion.iter().enumerate() {
            let prefix = format!("layers.{i}");
            match fu {
                Fusion::None => {}
                Fusion::Hatb(p) => p.visit(&join(&prefix, "hatb"), f),
                Fusion::Cross(c) => c.visit(&join(&prefix, "cross"), f),
            }
        }
    }
}

impl Params for ModelWeights {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        let mut g = |name: &str, shape: &[usize], v: &[f64]| f(&join(prefix, name), shape, v);
        self.visit_base(&mut g);
        self.visit_fusion(&mut g);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        visit_matrix_mut(prefix, "embed", &mut self.embed, f);
        visit_matrix_mut(prefix, "vision_proj", &mut self.vision_proj, f);
        let n = self.vision_bias.len();
        f(&join(prefix, "vision_bias"), &[n], &mut self.vision_bias);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
        visit_matrix_mut(prefix, "head", &mut self.head, f);
        for (i, fu) in self.fusion.iter_mut().enumerate() {
            let layer = join(prefix, &format!("layers.{i}"));
            match fu {
                Fusion::None => {}
                Fusion::Hatb(p) => p.visit_mut(&join(&layer, "hatb"), f),
                Fusion::Cross(c) => c.visit_mut(&join(&layer, "cross"), f),
            }
        }
    }
}

/// Exact parameter counts per weight group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub base: usize,
    pub added_by_fusion: usize,
    pub groups: Vec<(String, usize)>,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.base + self.added_by_fusion
    }
}

/// One training or evaluation input: a sequence and its raw slot features.
#[derive(Debug, Clone)]
pub struct Example {
    pub seq: InterleavedSequence,
    /// `[slots · patches_per_slot × vision_dim]`
    pub features: Matrix,
}

/// Dimensions actually used inside one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ForwardStats {
    /// Rows processed by every language-model layer.
    pub lm_seq_len: usize,
    /// Visual key rows available to cross-attention.
    pub visual_keys: usize,
    /// Query–key score entries summed over self-attention in all layers.
    pub self_score_entries: u64,
    /// Query–key score entries summed over all cross-attention modules.
    pub cross_score_entries: u64,
    /// Largest per-layer working set in floats, plus the persistent streams.
    pub peak_activation_floats: u64,
}

impl ForwardStats {
    /// Score FLOPs: two per score entry and channel.
    pub fn attn_flops(&self, dim: usize) -> u64 {
        2 * dim as u64 * (self.self_score_entries + self.cross_score_entries)
    }
}

/// Per-layer working set of a forward pass, used for both the measured
/// proxy and up-front budget checks.
pub fn layer_working_set(cfg: &ModelConfig, lm_len: usize, text_len: usize, visual_keys: usize, fused: bool) -> u64 {
    let (d, f, h) = (cfg.hidden_dim as u64, cfg.ffn_dim as u64, cfg.n_heads as u64);
    let (l, t, m) = (lm_len as u64, text_len as u64, visual_keys as u64);
    // ln, q, k, v, attention out, projection, residual + ffn in/out and hidden
    let mut floats = 7 * l * d + 2 * l * f + h * l * l;
    if fused {
        floats += 3 * m * d + h * t * m + 3 * t * d;
    }
    floats
}

/// Peak working-set estimate for a whole forward pass.
pub fn estimate_peak_floats(cfg: &ModelConfig, lm_len: usize, text_len: usize, visual_keys: usize) -> u64 {
    let fused = !cfg.fusion_layers().is_empty() && visual_keys > 0;
    let persistent = (lm_len + visual_keys) as u64 * cfg.hidden_dim as u64 + (text_len * cfg.vocab_size) as u64;
    persistent + layer_working_set(cfg, lm_len, text_len, visual_keys, fused)
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final residual stream at the text positions, `[L × D]`.
    pub hidden: Matrix,
    /// `[L × vocab]`
    pub logits: Matrix,
    pub stats: ForwardStats,
}

#[derive(Debug, Clone, Copy)]
enum RowSource {
    Token(usize),
    Patch(usize),
}

enum LayerCache {
    Block(BlockCache),
    Hatb(Box<(AttentionInputs, HatbOutput, HatbCache)>),
    Pre(CrossCache, BlockCache),
    Post {
        sa: SelfAttnCache,
        ln2: LnCache,
        cross: CrossCache,
        mlp: MlpCache,
    },
}

struct Trace {
    layout: Vec<RowSource>,
    text_rows: Vec<usize>,
    positions: Vec<usize>,
    layers: Vec<LayerCache>,
    ln_f: LnCache,
    normed: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    /// Builds a model with seeded weights. Base weights depend only on the
    /// seed and shapes, so every variant shares the same language model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let config = config.resolved()?;
        let (d, v) = (config.hidden_dim, config.vocab_size);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embed = Matrix::random(v, d, 1.0, &mut rng);
        let vision_proj = Matrix::random(d, config.vision_dim, 1.0 / (config.vision_dim as f64).sqrt(), &mut rng);
        let vision_bias = vec![0.0; d];
        let blocks: Vec<HostBlock> = (0..config.n_layers)
            .map(|_| HostBlock::init(d, config.n_heads, config.ffn_dim, &mut rng))
            .collect();
        let head = Matrix::random(v, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let fusion_layers = config.fusion_layers();
        let fusion = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                if !fusion_layers.contains(&i) {
                    Fusion::None
                } else if config.variant == Variant::Hyper {
                    Fusion::Hatb(HatbParams::from_host(b, config.hatb))
                } else {
                    Fusion::Cross(CrossSublayer::from_host(b))
                }
            })
            .collect();
        Ok(Self {
            weights: ModelWeights {
                embed,
                vision_proj,
                vision_bias,
                blocks,
                fusion,
                ln_f: LayerNorm::new(d),
                head,
            },
            config,
        })
    }

    pub fn from_parts(config: ModelConfig, weights: ModelWeights) -> Self {
        Self { config, weights }
    }

    pub fn count_params(&self) -> ParamBreakdown {
        let mut groups = Vec::new();
        let mut base = 0;
        self.weights.visit_base(&mut |name, _, v| {
            base += v.len();
            groups.push((name.to_string(), v.len()));
        });
        let mut added = 0;
        self.weights.visit_fusion(&mut |name, _, v| {
            added += v.len();
            groups.push((name.to_string(), v.len()));
        });
        ParamBreakdown {
            base,
            added_by_fusion: added,
            groups,
        }
    }

    /// Raw stub features for every slot of `seq`, keyed by this model's seed.
    pub fn example(&self, seq: InterleavedSequence) -> Example {
        let features = features_for_sequence(
            &seq,
            self.config.patches_per_slot,
            self.config.vision_dim,
            self.config.seed,
        );
        Example { seq, features }
    }

    pub fn forward(&self, ex: &Example) -> Result<ForwardOutput> {
        self.run(ex, false).map(|(out, _)| out)
    }

    fn project_visual(&self, ex: &Example) -> Result<Matrix> {
        let cfg = &self.config;
        let m = ex.seq.num_slots() * cfg.patches_per_slot;
        if ex.features.rows != m || (m > 0 && ex.features.cols != cfg.vision_dim) {
            return Err(Error::FeatureMismatch(format!(
                "{} slots need [{m} × {}] features, got {:?}",
                ex.seq.num_slots(),
                cfg.vision_dim,
                ex.features.shape()
            )));
        }
        if m == 0 {
            return Ok(Matrix::zeros(0, cfg.hidden_dim));
        }
        let mut h = ex.features.matmul_t(&self.weights.vision_proj)?;
        for r in 0..h.rows {
            add_vec(h.row_mut(r), &self.weights.vision_bias);
        }
        Ok(h)
    }

    fn layout(&self, seq: &InterleavedSequence) -> Vec<RowSource> {
        let mut rows = Vec::with_capacity(seq.len());
        let v = self.config.patches_per_slot;
        let mut slot = 0;
        for i in 0..seq.len() {
            rows.push(RowSource::Token(i));
            if self.config.variant == Variant::Concat {
                while slot < seq.num_slots() && seq.slots[slot].placeholder_position == i {
                    rows.extend((slot * v..(slot + 1) * v).map(RowSource::Patch));
                    slot += 1;
                }
            }
        }
        rows
    }

    fn run(&self, ex: &Example, keep: bool) -> Result<(ForwardOutput, Trace)> {
        let cfg = &self.config;
        let w = &self.weights;
        let seq = &ex.seq;
        seq.validate()?;
        if seq.is_empty() {
            return Err(Error::InvalidConfig("empty sequence".into()));
        }
        if let Some(&bad) = seq.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::InvalidConfig(format!("token {bad} outside vocabulary")));
        }
        if seq.image_token != cfg.image_token() {
            return Err(Error::InvalidConfig(format!(
                "sequence placeholder {} != model image_token {}",
                seq.image_token,
                cfg.image_token()
            )));
        }
        let h_img = self.project_visual(ex)?;
        let layout = self.layout(seq);
        let mut x = Matrix::zeros(layout.len(), cfg.hidden_dim);
        let mut text_rows = Vec::with_capacity(seq.len());
        for (r, src) in layout.iter().enumerate() {
            match *src {
                RowSource::Token(i) => {
                    x.row_mut(r).copy_from_slice(w.embed.row(seq.tokens[i] as usize));
                    text_rows.push(r);
                }
                RowSource::Patch(p) => x.row_mut(r).copy_from_slice(h_img.row(p)),
            }
        }
        let positions: Vec<usize> = (0..layout.len()).collect();
        let rope = build_rope_map(seq);
        let mask = build_cross_mask(seq);
        let ctx = CrossContext {
            rope: &rope,
            mask: &mask,
            patches: cfg.patches_per_slot,
            n_heads: cfg.n_heads,
        };

        let (lm_len, text_len, m) = (layout.len(), seq.len(), h_img.rows);
        let mut stats = ForwardStats {
            lm_seq_len: lm_len,
            visual_keys: if cfg.variant == Variant::Concat { 0 } else { m },
            ..Default::default()
        };
        let mut peak = 0u64;
        let mut layers = Vec::with_capacity(if keep { cfg.n_layers } else { 0 });
        for (host, fusion) in w.blocks.iter().zip(&w.fusion) {
            stats.self_score_entries += (lm_len * lm_len) as u64;
            let fused = !matches!(fusion, Fusion::None);
            if fused {
                stats.cross_score_entries += (text_len * m) as u64;
            }
            peak = peak.max(layer_working_set(cfg, lm_len, text_len, m, fused && m > 0));
            let (next, cache) = match fusion {
                Fusion::None => {
                    let (out, c) = host.forward(&x, &positions, keep)?;
                    (out, LayerCache::Block(c))
                }
                Fusion::Hatb(params) => {
                    let inputs = AttentionInputs {
                        h_text: x,
                        h_img: h_img.clone(),
                        patches_per_slot: cfg.patches_per_slot,
                        rope: rope.clone(),
                        cross_mask: mask.clone(),
                    };
                    let (out, c) = hatb_forward_cached(&inputs, host, params, keep)?;
                    (out.out.clone(), LayerCache::Hatb(Box::new((inputs, out, c))))
                }
                Fusion::Cross(cross) if cfg.variant == Variant::PostCross => {
                    let (h_self, sa) = host.self_attention(&x, &positions, keep)?;
                    let x1 = x.add(&h_self);
                    let (n2, ln2) = host.ln2.forward(&x1)?;
                    let (n2c, cc) = cross.forward(&n2, &h_img, &ctx, keep)?;
                    let (y, mlp) = host.mlp(&n2c)?;
                    (
                        x1.add(&y),
                        LayerCache::Post {
                            sa,
                            ln2,
                            cross: cc,
                            mlp,
                        },
                    )
                }
                Fusion::Cross(cross) => {
                    let (xc, cc) = cross.forward(&x, &h_img, &ctx, keep)?;
                    let (out, bc) = host.forward(&xc, &positions, keep)?;
                    (out, LayerCache::Pre(cc, bc))
                }
            };
            x = next;
            if keep {
                layers.push(cache);
            }
        }
        let persistent = (lm_len + m) as u64 * cfg.hidden_dim as u64 + (text_len * cfg.vocab_size) as u64;
        stats.peak_activation_floats = persistent + peak;

        let mut hidden = Matrix::zeros(text_len, cfg.hidden_dim);
        for (t, &r) in text_rows.iter().enumerate() {
            hidden.row_mut(t).copy_from_slice(x.row(r));
        }
        let (normed, ln_f) = w.ln_f.forward(&hidden)?;
        let logits = normed.matmul_t(&w.head)?;
        let trace = Trace {
            layout,
            text_rows,
            positions,
            layers,
            ln_f,
            normed,
        };
        Ok((ForwardOutput { hidden, logits, stats }, trace))
    }

    /// Gradients of `<d_logits, logits>` w.r.t. all weights.
    fn backward(&self, ex: &Example, trace: &Trace, d_logits: &Matrix) -> Result<ModelWeights> {
        let cfg = &self.config;
        let w = &self.weights;
        let mut g = w.zeros_like();
        g.head.add_assign(&d_logits.t_matmul(&trace.normed)?);
        let dn = d_logits.matmul(&w.head)?;
        let dh = w.ln_f.backward(&trace.ln_f, &dn, &mut g.ln_f);
        let mut dx = Matrix::zeros(trace.layout.len(), cfg.hidden_dim);
        for (t, &r) in trace.text_rows.iter().enumerate() {
            dx.row_mut(r).copy_from_slice(dh.row(t));
        }
        let m = ex.seq.num_slots() * cfg.patches_per_slot;
        let mut dimg = Matrix::zeros(m, cfg.hidden_dim);
        let rope = build_rope_map(&ex.seq);
        let mask = build_cross_mask(&ex.seq);
        let ctx = CrossContext {
            rope: &rope,
            mask: &mask,
            patches: cfg.patches_per_slot,
            n_heads: cfg.n_heads,
        };
        let pos = &trace.positions;
        for (i, cache) in trace.layers.iter().enumerate().rev() {
            let host = &w.blocks[i];
            let gh = &mut g.blocks[i];
            dx = match (cache, &w.fusion[i], &mut g.fusion[i]) {
                (LayerCache::Block(c), _, _) => host.backward(c, pos, &dx, gh)?,
                (LayerCache::Hatb(b), Fusion::Hatb(p), Fusion::Hatb(gp)) => {
                    let (inputs, out, c) = &**b;
                    let grads = hatb_backward(inputs, host, p, out, c, &dx)?;
                    gh.add_scaled(&grads.host, 1.0);
                    gp.add_scaled(&grads.hatb, 1.0);
                    dimg.add_assign(&grads.h_img);
                    grads.h_text
                }
                (LayerCache::Pre(cc, bc), Fusion::Cross(cross), Fusion::Cross(gc)) => {
                    let dxc = host.backward(bc, pos, &dx, gh)?;
                    let (dxin, di) = cross.backward(cc, &ctx, &dxc, gc)?;
                    dimg.add_assign(&di);
                    dxin
                }
                (
                    LayerCache::Post {
                        sa,
                        ln2,
                        cross: cc,
                        mlp,
                    },
                    Fusion::Cross(cross),
                    Fusion::Cross(gc),
                ) => {
                    let dn2c = host.mlp_backward(mlp, &dx, gh)?;
                    let (dn2, di) = cross.backward(cc, &ctx, &dn2c, gc)?;
                    dimg.add_assign(&di);
                    let mut dx1 = host.ln2.backward(ln2, &dn2, &mut gh.ln2);
                    dx1.add_assign(&dx);
                    let mut dxin = host.self_attention_backward(sa, pos, &dx1, gh)?;
                    dxin.add_assign(&dx1);
                    dxin
                }
                _ => return Err(Error::MissingCache("layer cache does not match fusion module")),
            };
        }
        for (r, src) in trace.layout.iter().enumerate() {
            match *src {
                RowSource::Token(i) => add_vec(g.embed.row_mut(ex.seq.tokens[i] as usize), dx.row(r)),
                RowSource::Patch(p) => add_vec(dimg.row_mut(p), dx.row(r)),
            }
        }
        if m > 0 {
            g.vision_proj.add_assign(&dimg.t_matmul(&ex.features)?);
            add_vec(&mut g.vision_bias, &dimg.column_sums());
        }
        Ok(g)
    }

    /// Mean next-token cross-entropy over every text position of the batch.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        let count = target_count(batch)?;
        let parts = exec::map_slice(batch, |ex| -> Result<f64> {
            let out = self.forward(ex)?;
            Ok(cross_entropy(&out.logits, &ex.seq.tokens, count).0)
        });
        let mut total = 0.0;
        for p in parts {
            total += p?;
        }
        finite(total)
    }

    pub fn loss_and_grad(&self, batch: &[Example]) -> Result<(f64, ModelWeights)> {
        let count = target_count(batch)?;
        let parts = exec::map_slice(batch, |ex| -> Result<(f64, ModelWeights)> {
            let (out, trace) = self.run(ex, true)?;
            let (loss, d_logits) = cross_entropy(&out.logits, &ex.seq.tokens, count);
            Ok((loss, self.backward(ex, &trace, &d_logits)?))
        });
        let mut total = 0.0;
        let mut grad = self.weights.zeros_like();
        for p in parts {
            let (l, g) = p?;
            total += l;
            grad.add_scaled(&g, 1.0);
        }
        Ok((finite(total)?, grad))
    }

    /// One full-batch gradient-descent step; returns the loss before the update.
    pub fn overfit_step(&mut self, batch: &[Example], lr: f64) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(batch)?;
        if !grad.flatten().iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        if lr != 0.0 {
            self.weights.add_scaled(&grad, -lr);
        }
        Ok(loss)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        write_tensors(path, &collect_params(&self.weights, ""))
    }

    /// Loads weights saved from a model with the same configuration.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let tensors = read_tensors(path)?;
        load_params(&mut self.weights, "", &tensors)
    }
}

fn finite(x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("loss = {x}")))
    }
}

fn target_count(batch: &[Example]) -> Result<usize> {
    let n: usize = batch.iter().map(|ex| ex.seq.len().saturating_sub(1)).sum();
    if n == 0 {
        return Err(Error::InvalidConfig("batch has no next-token targets".into()));
    }
    Ok(n)
}

/// Summed cross-entropy of predicting `tokens[t + 1]` from row `t`, divided
/// by `count`, and its gradient w.r.t. the logits.
fn cross_entropy(logits: &Matrix, tokens: &[u32], count: usize) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    let scale = 1.0 / count as f64;
    for t in 0..tokens.len().saturating_sub(1) {
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let target = tokens[t + 1] as usize;
        loss += (max + sum.ln() - row[target]) * scale;
        let g = grad.row_mut(t);
        for (j, z) in row.iter().enumerate() {
            g[j] = (z - max).exp() / sum * scale;
        }
        g[target] -= scale;
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interleave::{build_sequence, CropPolicy, Segment};
    use crate::oracle::reference::{from_rows, model_reference};

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            n_heads: 2,
            n_layers: 4,
            head_dim: 0,
            ffn_dim: 32,
            vocab_size: 40,
            patches_per_slot: 3,
            hatb_indices: vec![0, 2],
            variant,
            seed: 11,
            vision_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn two_images(image_token: u32) -> InterleavedSequence {
        build_sequence(
            &[
                Segment::text(vec![1u32, 2, 3]),
                Segment::image(10, 448, 448),
                Segment::text(vec![4u32, 5]),
                Segment::image(11, 300, 900),
                Segment::text(vec![6u32]),
            ],
            CropPolicy::Off,
            image_token,
        )
        .unwrap()
    }

    #[test]
    fn text_only_identical_across_variants() {
        let seq = InterleavedSequence::text_only(vec![3, 1, 4, 1, 5, 9, 2, 6], 39);
        let outs: Vec<_> = Variant::ALL
            .iter()
            .map(|&v| {
                let m = Model::new(small(v)).unwrap();
                m.forward(&m.example(seq.clone())).unwrap()
            })
            .collect();
        for o in &outs[1..] {
            assert_eq!(o.hidden, outs[0].hidden);
            assert_eq!(o.logits, outs[0].logits);
        }
    }

    #[test]
    fn sequence_lengths() {
        for v in Variant::ALL {
            let m = Model::new(small(v)).unwrap();
            let ex = m.example(two_images(39));
            let out = m.forward(&ex).unwrap();
            let want = if v == Variant::Concat { 8 + 2 * 3 } else { 8 };
            assert_eq!(out.stats.lm_seq_len, want, "{v}");
            assert_eq!(out.logits.shape(), [8, 40]);
        }
    }

    #[test]
    fn hyper_matches_composed_oracle() {
        let m = Model::new(small(Variant::Hyper)).unwrap();
        let ex = m.example(two_images(39));
        let out = m.forward(&ex).unwrap();
        let (hidden, logits) = model_reference(&m, &ex).unwrap();
        assert!(out.hidden.max_abs_diff(&from_rows(&hidden, 16)) < 1e-9);
        assert!(out.logits.max_abs_diff(&from_rows(&logits, 40)) < 1e-9);
    }

    #[test]
    fn parameter_accounting() {
        let base = ModelConfig::default();
        let hyper2 = Model::new(ModelConfig {
            hatb_indices: vec![0, 4],
            ..base.clone()
        })
        .unwrap();
        assert_eq!(hyper2.count_params().added_by_fusion, 16512);
        let hyper4 = Model::new(base.clone()).unwrap();
        assert_eq!(hyper4.count_params().added_by_fusion, 4 * (2 * 64 * 64 + 64));
        let concat = Model::new(base.with_variant(Variant::Concat)).unwrap();
        assert_eq!(concat.count_params().added_by_fusion, 0);
        assert_eq!(concat.count_params().base, hyper4.count_params().base);
        let dense = Model::new(base.with_variant(Variant::FlamingoDense)).unwrap();
        assert!(dense.count_params().added_by_fusion > hyper4.count_params().added_by_fusion);
        for m in [&hyper2, &hyper4, &concat, &dense] {
            let p = m.count_params();
            assert_eq!(p.total(), m.weights.num_params());
            assert_eq!(p.groups.iter().map(|g| g.1).sum::<usize>(), p.total());
        }
    }

    #[test]
    fn deterministic_and_serializable() {
        let a = Model::new(small(Variant::Hyper)).unwrap();
        let b = Model::new(small(Variant::Hyper)).unwrap();
        assert_eq!(a, b);
        let ex = a.example(two_images(39));
        assert_eq!(a.forward(&ex).unwrap().logits, b.forward(&ex).unwrap().logits);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let mut trained = a.clone();
        trained.overfit_step(std::slice::from_ref(&ex), 0.1).unwrap();
        trained.save_weights(&path).unwrap();
        let mut loaded = Model::new(small(Variant::Hyper)).unwrap();
        loaded.load_weights(&path).unwrap();
        assert_eq!(loaded, trained);
    }

    #[test]
    fn zero_lr_keeps_loss_and_small_step_descends() {
        for v in Variant::ALL {
            let mut m = Model::new(small(v)).unwrap();
            let batch = vec![m.example(two_images(39))];
            let l0 = m.overfit_step(&batch, 0.0).unwrap();
            assert_eq!(m.loss(&batch).unwrap(), l0);
            m.overfit_step(&batch, 1e-3).unwrap();
            assert!(m.loss(&batch).unwrap() < l0, "{v}");
        }
    }

    #[test]
    fn rejects_mismatched_features() {
        let m = Model::new(small(Variant::Hyper)).unwrap();
        let mut ex = m.example(two_images(39));
        ex.features = Matrix::zeros(5, 8);
        assert!(matches!(m.forward(&ex), Err(Error::FeatureMismatch(_))));
        let wrong_token = Example {
            seq: InterleavedSequence::text_only(vec![1, 2], 7),
            features: Matrix::zeros(0, 8),
        };
        assert!(m.forward(&wrong_token).is_err());
    }
}
