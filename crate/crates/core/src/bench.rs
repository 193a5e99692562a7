//! Closed-form cost models and timed forward passes for each fusion variant.
//!
//! Attention FLOPs count the score products only (`QKᵀ` and the weighted
//! sum, two FLOPs per score entry and channel); projection FLOPs are
//! reported separately per weight group. Memory is a float-count proxy.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interleave::{build_sequence, CropPolicy, InterleavedSequence, Segment};
use crate::model::{estimate_peak_floats, ForwardStats, Model, ModelConfig, Variant};

pub const CSV_HEADER: &str =
    "variant,n_images,lm_seq_len,added_params,attn_flops,kv_cache_floats,wall_ms_median,wall_ms_p10,wall_ms_p90";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub n_images: usize,
    pub patches_per_slot: usize,
    /// Language tokens, placeholders included.
    pub text_len: usize,
    #[serde(default)]
    pub config: ModelConfig,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Refuse to run workloads whose estimated peak exceeds this many floats.
    #[serde(default)]
    pub memory_budget_floats: Option<u64>,
}

fn default_repeats() -> usize {
    5
}

impl Workload {
    pub fn new(config: ModelConfig, n_images: usize, patches_per_slot: usize, text_len: usize, repeats: usize) -> Self {
        Self {
            n_images,
            patches_per_slot,
            text_len,
            config,
            repeats,
            memory_budget_floats: None,
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches_per_slot == 0 || self.text_len == 0 || self.repeats < 3 {
            return Err(Error::InvalidConfig(
                "workload needs patches_per_slot, text_len > 0 and repeats >= 3".into(),
            ));
        }
        Ok(())
    }

    /// The model configuration actually run for `variant`.
    pub fn model_config(&self, variant: Variant) -> Result<ModelConfig> {
        ModelConfig {
            variant,
            patches_per_slot: self.patches_per_slot,
            ..self.config.clone()
        }
        .resolved()
    }

    /// `text_len` tokens with `n_images` placeholders spread evenly, starting at 0.
    pub fn sequence(&self, image_token: u32) -> Result<InterleavedSequence> {
        let (t, n) = (self.text_len, self.n_images);
        if n > t {
            return Err(Error::InvalidConfig(format!(
                "{n} placeholders do not fit in {t} tokens"
            )));
        }
        let slots: Vec<usize> = (0..n).map(|i| i * t / n.max(1)).collect();
        let mut segments = Vec::new();
        let mut text = Vec::new();
        for pos in 0..t {
            if slots.binary_search(&pos).is_ok() {
                if !text.is_empty() {
                    segments.push(Segment::text(std::mem::take(&mut text)));
                }
                segments.push(Segment::image(pos as u64, 448, 448));
            } else {
                text.push(((pos * 7 + 3) % image_token as usize) as u32);
            }
        }
        if !text.is_empty() {
            segments.push(Segment::text(text));
        }
        build_sequence(&segments, CropPolicy::Off, image_token)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: Variant,
    pub n_images: usize,
    pub lm_seq_len: usize,
    pub added_params: usize,
    pub attn_flops: u64,
    pub kv_cache_floats: u64,
    pub wall_ms_median: Option<f64>,
    pub wall_ms_p10: Option<f64>,
    pub wall_ms_p90: Option<f64>,
    /// Not part of the CSV.
    #[serde(skip)]
    pub proj_flops: u64,
    #[serde(skip)]
    pub peak_floats: u64,
    /// Dimensions observed inside the timed forward pass.
    #[serde(skip)]
    pub measured: Option<ForwardStats>,
}

/// Parameters one fusion module adds at hidden size `d`.
pub fn added_params_per_layer(config: &ModelConfig) -> usize {
    let d = config.hidden_dim;
    match config.variant {
        Variant::Concat => 0,
        Variant::Hyper => {
            let o = config.hatb;
            2 * d * d
                + if o.adaptive_gate { d } else { 0 }
                + usize::from(o.adaptive_gate && o.gate_bias)
                + if o.shared_layernorm { 0 } else { 2 * d }
        }
        Variant::PreCross | Variant::PostCross | Variant::FlamingoDense => 4 * d * d + d,
    }
}

/// Analytic fields of a [`CostReport`]; timed fields are left empty.
pub fn cost_model(variant: Variant, config: &ModelConfig, workload: &Workload) -> Result<CostReport> {
    workload.validate()?;
    let cfg = Workload {
        config: config.clone(),
        ..workload.clone()
    }
    .model_config(variant)?;
    let (t, nv) = (
        workload.text_len as u64,
        (workload.n_images * workload.patches_per_slot) as u64,
    );
    let (d, f, layers) = (cfg.hidden_dim as u64, cfg.ffn_dim as u64, cfg.n_layers as u64);
    let k = cfg.fusion_layers().len() as u64;
    let lm = if variant == Variant::Concat { t + nv } else { t };
    let attn_flops = layers * 2 * lm * lm * d + k * 2 * t * nv * d;
    let cross_proj = match variant {
        Variant::Concat => 0,
        Variant::Hyper => k * 2 * nv * 2 * d * d,
        _ => k * (2 * nv * 2 * d * d + 2 * t * 2 * d * d),
    };
    let proj_flops = layers * 2 * lm * (4 * d * d + 2 * d * f)
        + 2 * nv * cfg.vision_dim as u64 * d
        + 2 * t * d * cfg.vocab_size as u64
        + cross_proj;
    Ok(CostReport {
        variant,
        n_images: workload.n_images,
        lm_seq_len: lm as usize,
        added_params: k as usize * added_params_per_layer(&cfg),
        attn_flops,
        kv_cache_floats: 2 * lm * d * layers + 2 * nv * d * k,
        wall_ms_median: None,
        wall_ms_p10: None,
        wall_ms_p90: None,
        proj_flops,
        peak_floats: estimate_peak_floats(
            &cfg,
            lm as usize,
            t as usize,
            if variant == Variant::Concat { 0 } else { nv as usize },
        ),
        measured: None,
    })
}

/// Linear interpolation between closest ranks; `sorted` must be ascending.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times `repeats` forward passes after one warmup pass.
pub fn measure(variant: Variant, config: &ModelConfig, workload: &Workload) -> Result<CostReport> {
    let mut report = cost_model(variant, config, workload)?;
    if let Some(budget) = workload.memory_budget_floats {
        if report.peak_floats > budget {
            return Err(Error::MemoryBudget {
                needed: report.peak_floats,
                budget,
            });
        }
    }
    let model = Model::new(
        Workload {
            config: config.clone(),
            ..workload.clone()
        }
        .model_config(variant)?,
    )?;
    let example = model.example(workload.sequence(model.config.image_token())?);
    let warm = model.forward(&example)?;
    let mut times = Vec::with_capacity(workload.repeats);
    for _ in 0..workload.repeats {
        let start = Instant::now();
        let out = model.forward(&example)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        debug_assert_eq!(out.stats, warm.stats);
    }
    times.sort_by(f64::total_cmp);
    report.wall_ms_median = Some(percentile(&times, 0.5));
    report.wall_ms_p10 = Some(percentile(&times, 0.1));
    report.wall_ms_p90 = Some(percentile(&times, 0.9));
    report.peak_floats = warm.stats.peak_activation_floats;
    report.measured = Some(warm.stats);
    Ok(report)
}

pub fn to_csv(reports: &[CostReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::EmptyReports);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn emit_report(reports: &[CostReport], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(reports)?)?;
    Ok(())
}

/// Parses CSV written by [`emit_report`].
pub fn parse_report(text: &str) -> Result<Vec<CostReport>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header `{header}`"),
        });
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Slope ratio of wall-clock growth between two image counts:
/// `(concat(hi) - concat(lo)) / (hyper(hi) - hyper(lo))`. A non-positive hyper
/// growth means hyper did not slow down measurably and yields infinity.
pub fn growth_ratio(concat: (f64, f64), hyper: (f64, f64)) -> f64 {
    let h = hyper.1 - hyper.0;
    if h <= 0.0 {
        f64::INFINITY
    } else {
        (concat.1 - concat.0) / h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            n_heads: 2,
            n_layers: 2,
            head_dim: 0,
            ffn_dim: 32,
            vocab_size: 64,
            hatb_indices: vec![0],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn no_images_all_equal() {
        let cfg = ModelConfig::default();
        let w = Workload::new(cfg.clone(), 0, 16, 256, 3);
        let reports: Vec<_> = Variant::ALL.iter().map(|&v| cost_model(v, &cfg, &w).unwrap()).collect();
        for r in &reports {
            assert_eq!(
                (r.lm_seq_len, r.attn_flops, r.kv_cache_floats),
                (256, reports[0].attn_flops, reports[0].kv_cache_floats)
            );
        }
    }

    #[test]
    fn closed_forms() {
        let cfg = ModelConfig::default();
        let w = Workload::new(cfg.clone(), 400, 16, 256, 3);
        let concat = cost_model(Variant::Concat, &cfg, &w).unwrap();
        let hyper = cost_model(Variant::Hyper, &cfg, &w).unwrap();
        let dense = cost_model(Variant::FlamingoDense, &cfg, &w).unwrap();
        assert_eq!((concat.lm_seq_len, hyper.lm_seq_len), (6656, 256));
        assert_eq!(hyper.added_params, 33024);
        assert_eq!(concat.attn_flops, 8 * 2 * 6656 * 6656 * 64);
        assert_eq!(hyper.attn_flops, 8 * 2 * 256 * 256 * 64 + 4 * 2 * 256 * 6400 * 64);
        assert!(hyper.attn_flops < dense.attn_flops && dense.attn_flops < concat.attn_flops);
        assert_eq!(hyper.kv_cache_floats, 2 * 256 * 64 * 8 + 2 * 6400 * 64 * 4);
    }

    #[test]
    fn monotone_in_n_v_t() {
        let cfg = ModelConfig::default();
        for v in Variant::ALL {
            let mut prev: Option<CostReport> = None;
            for (n, p, t) in [(1, 4, 16), (2, 4, 16), (2, 8, 16), (2, 8, 32), (9, 8, 32)] {
                let r = cost_model(v, &cfg, &Workload::new(cfg.clone(), n, p, t, 3)).unwrap();
                if let Some(q) = prev {
                    assert!(r.lm_seq_len >= q.lm_seq_len && r.attn_flops >= q.attn_flops);
                    assert!(r.kv_cache_floats >= q.kv_cache_floats && r.proj_flops >= q.proj_flops);
                }
                prev = Some(r);
            }
        }
    }

    #[test]
    fn measured_dimensions_match_formulas() {
        let cfg = toy();
        for v in Variant::ALL {
            let w = Workload::new(cfg.clone(), 3, 4, 12, 3);
            let r = measure(v, &cfg, &w).unwrap();
            let m = r.measured.unwrap();
            assert_eq!(m.lm_seq_len, r.lm_seq_len, "{v}");
            assert_eq!(m.attn_flops(cfg.hidden_dim), r.attn_flops, "{v}");
            let model = Model::new(w.model_config(v).unwrap()).unwrap();
            assert_eq!(model.count_params().added_by_fusion, r.added_params, "{v}");
            let (p10, med, p90) = (
                r.wall_ms_p10.unwrap(),
                r.wall_ms_median.unwrap(),
                r.wall_ms_p90.unwrap(),
            );
            assert!(p10 <= med && med <= p90);
        }
    }

    #[test]
    fn workload_sequence_layout() {
        let w = Workload::new(toy(), 4, 2, 10, 3);
        let s = w.sequence(63).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.placeholder_positions(), vec![0, 2, 5, 7]);
        assert!(Workload::new(toy(), 11, 2, 10, 3).sequence(63).is_err());
        assert!(Workload::new(toy(), 1, 2, 10, 2).validate().is_err());
    }

    #[test]
    fn memory_budget_enforced() {
        let mut w = Workload::new(toy(), 2, 4, 12, 3);
        w.memory_budget_floats = Some(10);
        assert!(matches!(
            measure(Variant::Hyper, &toy(), &w),
            Err(Error::MemoryBudget { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let cfg = toy();
        assert!(matches!(to_csv(&[]), Err(Error::EmptyReports)));
        let mut r = cost_model(Variant::PostCross, &cfg, &Workload::new(cfg.clone(), 2, 4, 12, 3)).unwrap();
        let text = to_csv(std::slice::from_ref(&r)).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        r.wall_ms_median = Some(1.25);
        r.wall_ms_p10 = Some(0.5);
        r.wall_ms_p90 = Some(2.0 / 3.0);
        let back = parse_report(&to_csv(std::slice::from_ref(&r)).unwrap()).unwrap();
        assert_eq!(back[0].n_images, r.n_images);
        assert_eq!(back[0].attn_flops, r.attn_flops);
        assert_eq!(back[0].wall_ms_p90, r.wall_ms_p90);
        assert_eq!(back[0].variant, Variant::PostCross);

        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&[r.clone()], &dir.path().join("missing/x.csv")).is_err());
        emit_report(&[r], &dir.path().join("x.csv")).unwrap();
    }
}
