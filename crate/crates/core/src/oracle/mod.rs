//! Independent references, randomized cases and gradient checks.

pub mod numeric;
pub mod reference;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fixtures::{collect_params, NamedTensor};
use crate::hyperattention::layers::{join, visit_matrix, visit_matrix_mut, Visit, VisitMut};
use crate::hyperattention::{
    hatb_backward, hatb_forward, hatb_forward_cached, AttentionInputs, HatbOptions, HatbParams, HostBlock, Params,
};
use crate::interleave::{build_sequence, CropPolicy, InterleavedSequence, Segment};
use crate::model::{Example, Model, ModelConfig, Variant};
use crate::tensor::{dot, Matrix};

pub use numeric::{
    compare, compare_with_floor, finite_diff_grad, finite_diff_params, ComparisonReport, FD_EPS, REL_FLOOR,
};
pub use reference::{block_reference, dense_attention_reference, hatb_reference, model_reference};

/// Bounds for randomized HATB cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseLimits {
    pub max_len: usize,
    pub max_visual: usize,
    pub max_dim: usize,
}

impl Default for CaseLimits {
    fn default() -> Self {
        Self {
            max_len: 32,
            max_visual: 48,
            max_dim: 64,
        }
    }
}

/// A random interleaving of text runs, images and short videos, built with
/// cropping on about a fifth of the time.
///
/// The result has at most `max_len` tokens and at most `max_slots` image slots.
pub fn random_sequence<R: Rng>(rng: &mut R, max_len: usize, max_slots: usize, image_token: u32) -> InterleavedSequence {
    loop {
        let mut segments = Vec::new();
        let mut budget = rng.gen_range(1..=max_len.max(1));
        let mut next_id = rng.gen_range(0..1_000_000u64);
        while budget > 0 {
            match rng.gen_range(0..4) {
                0 | 1 => {
                    let n = rng.gen_range(1..=budget.min(6));
                    segments.push(Segment::text(
                        (0..n).map(|_| rng.gen_range(0..image_token)).collect::<Vec<_>>(),
                    ));
                    budget -= n;
                }
                2 => {
                    segments.push(Segment::image(next_id, rng.gen_range(1..2000), rng.gen_range(1..2000)));
                    budget -= 1;
                }
                _ => {
                    let frames = rng.gen_range(1..=budget.min(4));
                    segments.push(Segment::video(next_id, frames as u32));
                    budget -= frames;
                }
            }
            next_id += 1;
        }
        let policy = if rng.gen_bool(0.2) {
            CropPolicy::On
        } else {
            CropPolicy::Off
        };
        if let Ok(seq) = build_sequence(&segments, policy, image_token) {
            if seq.num_slots() <= max_slots {
                return seq;
            }
        }
    }
}

/// Everything a standalone HATB evaluation depends on, exposed as one
/// parameter set so inputs and weights are finite-differenced together.
#[derive(Debug, Clone, PartialEq)]
pub struct HatbCase {
    pub host: HostBlock,
    pub hatb: HatbParams,
    pub h_text: Matrix,
    pub h_img: Matrix,
    pub seq: InterleavedSequence,
    pub patches: usize,
    /// Weights of the scalar objective `<upstream, out>`.
    pub upstream: Matrix,
}

impl Params for HatbCase {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.host.visit(&join(prefix, "host"), f);
        self.hatb.visit(&join(prefix, "hatb"), f);
        visit_matrix(prefix, "h_text", &self.h_text, f);
        visit_matrix(prefix, "h_img", &self.h_img, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.host.visit_mut(&join(prefix, "host"), f);
        self.hatb.visit_mut(&join(prefix, "hatb"), f);
        visit_matrix_mut(prefix, "h_text", &mut self.h_text, f);
        visit_matrix_mut(prefix, "h_img", &mut self.h_img, f);
    }
}

impl HatbCase {
    /// A random case within `limits`. Visual weights and the gate are moved
    /// off their initial values so every gradient path is exercised.
    pub fn random<R: Rng>(rng: &mut R, limits: CaseLimits, options: HatbOptions) -> Self {
        // A two-channel layernorm is nearly a sign function, whose curvature
        // swamps central differences; stay at D >= 4 whenever limits allow.
        let (heads, d) = loop {
            let heads = *[1usize, 2, 4].choose(rng).expect("nonempty");
            let max_head = (limits.max_dim / heads).max(2);
            let head_dim = 2 * rng.gen_range(1..=(max_head / 2).min(8));
            let d = heads * head_dim;
            if d >= 4 || limits.max_dim < 4 {
                break (heads, d);
            }
        };
        let patches = rng.gen_range(1..=4usize.min(limits.max_visual));
        let image_token = 1000;
        let seq = random_sequence(rng, limits.max_len, limits.max_visual / patches, image_token);
        Self::with_sequence(rng, seq, d, heads, patches, options)
    }

    pub fn with_sequence<R: Rng>(
        rng: &mut R,
        seq: InterleavedSequence,
        d: usize,
        heads: usize,
        patches: usize,
        options: HatbOptions,
    ) -> Self {
        let host = HostBlock::init(d, heads, 2 * d, rng);
        let mut hatb = HatbParams::from_host(&host, options);
        let perturb = Matrix::random(2 * d, d, 0.2 / (d as f64).sqrt(), rng);
        hatb.w_kv_img.add_assign(&perturb);
        hatb.w_gate.iter_mut().for_each(|g| *g = rng.gen_range(-0.5..0.5));
        hatb.gate_bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        if let Some(ln) = hatb.img_norm.as_mut() {
            ln.gamma.iter_mut().for_each(|g| *g += rng.gen_range(-0.1..0.1));
            ln.beta.iter_mut().for_each(|b| *b += rng.gen_range(-0.1..0.1));
        }
        let l = seq.len();
        let m = seq.num_slots() * patches;
        Self {
            host,
            hatb,
            h_text: Matrix::random(l, d, 1.0, rng),
            h_img: Matrix::random(m, d, 1.0, rng),
            seq,
            patches,
            upstream: Matrix::random(l, d, 1.0, rng),
        }
    }

    pub fn inputs(&self) -> Result<AttentionInputs> {
        AttentionInputs::from_sequence(self.h_text.clone(), self.h_img.clone(), &self.seq, self.patches)
    }

    /// `<upstream, hatb_forward(...).out>`
    pub fn objective(&self) -> Result<f64> {
        let (out, _) = hatb_forward_cached(&self.inputs()?, &self.host, &self.hatb, false)?;
        Ok(dot(&out.out.data, &self.upstream.data))
    }

    /// Analytic gradient of [`Self::objective`], in the same layout as the case.
    pub fn analytic_grad(&self) -> Result<HatbCase> {
        let inputs = self.inputs()?;
        let (out, cache) = hatb_forward_cached(&inputs, &self.host, &self.hatb, true)?;
        let g = hatb_backward(&inputs, &self.host, &self.hatb, &out, &cache, &self.upstream)?;
        Ok(HatbCase {
            host: g.host,
            hatb: g.hatb,
            h_text: g.h_text,
            h_img: g.h_img,
            ..self.clone()
        })
    }
}

/// Largest relative deviation `|a - r| / max(|r|, 1)` of the HATB forward
/// pass from [`hatb_reference`], over the block output, the cross-attention
/// output and the gate.
pub fn oracle_deviation(case: &HatbCase) -> Result<f64> {
    let inputs = case.inputs()?;
    let out = hatb_forward(&inputs, &case.host, &case.hatb)?;
    let r = hatb_reference(
        &case.h_text,
        &case.h_img,
        case.patches,
        &inputs.rope,
        &inputs.cross_mask,
        &case.host,
        &case.hatb,
    );
    let rel = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
            .fold(0.0, f64::max)
    };
    let flat = |rows: &[Vec<f64>]| rows.concat();
    Ok(rel(&out.out.data, &flat(&r.out))
        .max(rel(&out.h_cross.data, &flat(&r.h_cross)))
        .max(rel(&out.gate, &r.gate)))
}

/// Absolute floor for gradient comparisons. Central differences at
/// `ε = 1e-5` carry roundoff of order `|f| · 1e-16 / ε ≈ 1e-11 · |f|`, so
/// gradients smaller than this floor are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Backward vs. central finite differences for one HATB case.
pub fn gradcheck_hatb(case: &HatbCase, tol: f64) -> Result<ComparisonReport> {
    let analytic = collect_params(&case.analytic_grad()?, "");
    let numeric = finite_diff_params(case, |c| c.objective(), FD_EPS)?;
    compare_with_floor(&analytic, &numeric, tol, GRAD_FLOOR)
}

/// A small model and a fixed batch for whole-model gradient checks.
pub fn small_model_case<R: Rng>(rng: &mut R, variant: Variant, seed: u64) -> Result<(Model, Vec<Example>)> {
    let config = ModelConfig {
        hidden_dim: 8,
        n_heads: 2,
        n_layers: 2,
        head_dim: 0,
        ffn_dim: 16,
        vocab_size: 24,
        patches_per_slot: 2,
        hatb_indices: vec![1],
        variant,
        seed,
        vision_dim: 6,
        ..ModelConfig::default()
    };
    let mut model = Model::new(config)?;
    // Move fusion gates away from zero so their gradients are informative.
    model.weights.visit_mut("", &mut |name, _, v| {
        if name.ends_with("w_gate") {
            v.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
        }
    });
    let image_token = model.config.image_token();
    let batch = (0..2)
        .map(|_| {
            let seq = random_sequence(rng, 8, 3, image_token);
            model.example(seq)
        })
        .collect();
    Ok((model, batch))
}

/// Full-model backward vs. central finite differences of the batch loss.
pub fn gradcheck_model(model: &Model, batch: &[Example], tol: f64) -> Result<ComparisonReport> {
    let (_, grad) = model.loss_and_grad(batch)?;
    let analytic: Vec<NamedTensor> = collect_params(&grad, "");
    let config = model.config.clone();
    let numeric = finite_diff_params(
        &model.weights,
        |w| Model::from_parts(config.clone(), w.clone()).loss(batch),
        FD_EPS,
    )?;
    compare_with_floor(&analytic, &numeric, tol, GRAD_FLOOR)
}
