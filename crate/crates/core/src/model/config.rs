use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperattention::HatbOptions;

/// Where and how visual features enter the language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Visual tokens spliced into the LM sequence after their placeholder.
    Concat,
    /// Gated cross-attention sub-layer before the input layernorm.
    PreCross,
    /// Gated cross-attention sub-layer between the second layernorm and the MLP.
    PostCross,
    /// [`Variant::PreCross`] at every layer.
    FlamingoDense,
    /// Hyper attention blocks at the selected layers.
    Hyper,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Concat,
        Variant::PreCross,
        Variant::PostCross,
        Variant::FlamingoDense,
        Variant::Hyper,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Concat => "concat",
            Variant::PreCross => "pre_cross",
            Variant::PostCross => "post_cross",
            Variant::FlamingoDense => "flamingo_dense",
            Variant::Hyper => "hyper",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

/// `indices[i] = floor(i · n_layers / k)`.
pub fn default_hatb_indices(n_layers: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n_layers {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= k <= n_layers, got k={k}, n_layers={n_layers}"
        )));
    }
    Ok((0..k).map(|i| i * n_layers / k).collect())
}

fn default_vision_dim() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Derived as `hidden_dim / n_heads` when omitted (or zero).
    #[serde(default)]
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub patches_per_slot: usize,
    /// Defaults to four evenly spread layers (fewer if the model is shallower).
    #[serde(default)]
    pub hatb_indices: Vec<usize>,
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
    /// Width of the raw features produced by the vision stub.
    #[serde(default = "default_vision_dim")]
    pub vision_dim: usize,
    #[serde(default)]
    pub hatb: HatbOptions,
    /// Placeholder id; defaults to the largest vocabulary id.
    #[serde(default)]
    pub image_token: Option<u32>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            n_heads: 4,
            n_layers: 8,
            head_dim: 16,
            ffn_dim: 256,
            vocab_size: 512,
            patches_per_slot: 16,
            hatb_indices: vec![0, 2, 4, 6],
            variant: Variant::Hyper,
            seed: 0,
            vision_dim: default_vision_dim(),
            hatb: HatbOptions::default(),
            image_token: None,
        }
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<ModelConfig>(text)?.resolved()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Fills derived fields and checks every invariant.
    pub fn resolved(mut self) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.hidden_dim == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("hidden_dim, n_heads and n_layers must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        let head_dim = self.hidden_dim / self.n_heads;
        if self.head_dim == 0 {
            self.head_dim = head_dim;
        } else if self.head_dim != head_dim {
            return bad(format!(
                "head_dim {} != hidden_dim / n_heads = {head_dim}",
                self.head_dim
            ));
        }
        if !head_dim.is_multiple_of(2) {
            return Err(Error::OddHeadDim(head_dim));
        }
        if self.ffn_dim == 0 || self.vocab_size < 2 || self.patches_per_slot == 0 || self.vision_dim == 0 {
            return bad("ffn_dim, patches_per_slot, vision_dim must be positive and vocab_size >= 2".into());
        }
        if self.hatb_indices.is_empty() {
            self.hatb_indices = default_hatb_indices(self.n_layers, self.n_layers.min(4))?;
        }
        if self.hatb_indices.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("hatb_indices {:?} not strictly increasing", self.hatb_indices));
        }
        if self.hatb_indices.iter().any(|&i| i >= self.n_layers) {
            return bad(format!(
                "hatb_indices {:?} out of range for {} layers",
                self.hatb_indices, self.n_layers
            ));
        }
        let image_token = self.image_token();
        if image_token as usize >= self.vocab_size {
            return bad(format!("image_token {image_token} outside vocabulary"));
        }
        Ok(self)
    }

    pub fn image_token(&self) -> u32 {
        self.image_token.unwrap_or(self.vocab_size as u32 - 1)
    }

    /// Layers that carry a fusion module for the configured variant.
    pub fn fusion_layers(&self) -> Vec<usize> {
        match self.variant {
            Variant::Concat => Vec::new(),
            Variant::FlamingoDense => (0..self.n_layers).collect(),
            Variant::PreCross | Variant::PostCross | Variant::Hyper => self.hatb_indices.clone(),
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }
}
