//! The hyper attention transformer block and the standard block it extends.

pub mod attention;
pub mod block;
pub mod hatb;
pub mod layers;
pub mod rotary;

pub use attention::{attend, attend_backward, AttentionOut, KeyMask};
pub use block::HostBlock;
pub use hatb::{
    adaptive_gate, cross_attention, fuse, hatb_backward, hatb_forward, hatb_forward_cached, project_visual_kv,
    shared_layernorm, AttentionInputs, HatbCache, HatbGrads, HatbOptions, HatbOutput, HatbParams,
};
pub use layers::{LayerNorm, Params, Visit, VisitMut};
pub use rotary::apply_rotary;
