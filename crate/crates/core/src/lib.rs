//! Chunk-shifted sparse attention engine: kernels for cross-chunk
//! KV-shift and dilated attention patterns, ground-truth mask oracles,
//! receptive-field and cost analysis, and a small trainable byte-level
//! language model that exercises the patterns end to end.

pub mod analysis;
pub mod error;
pub mod kernels;
pub mod lm;
pub mod pattern;
pub mod tensor;

pub use error::{Error, Result};
pub use pattern::{build_head_plans, build_mask, AttnConfig, AttentionMask, HeadPlan, PatternSpec};
pub use tensor::{Element, Precision, Tensor, MASK_SENTINEL};
