//! Hyper attention for interleaved image-text sequences.
//!
//! A tiny decoder-only language model whose sparse hyper attention blocks
//! (HATBs) fuse visual features through masked cross-attention running in
//! parallel with self-attention, together with:
//!
//! - [`interleave`]: placeholder expansion, crop grids, MI-Rope positions, causal cross masks
//! - [`hyperattention`]: the HATB forward and hand-derived backward
//! - [`model`]: the toy LM with five fusion variants
//! - [`oracle`]: scalar reference implementations and finite-difference checks
//! - [`bench`]: analytic cost models and timed forward passes
//! - [`distractor`]: the distractor-resistance evaluation with CircularEval scoring
//! - [`cli`]: the `hyperattn` command-line front end

#![allow(clippy::needless_range_loop)]

pub mod bench;
pub mod cli;
pub mod distractor;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod hyperattention;
pub mod interleave;
pub mod model;
pub mod oracle;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
