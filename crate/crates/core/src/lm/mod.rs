//! Small decoder-only language model with pluggable attention patterns,
//! rotary embeddings with position interpolation, a deterministic
//! training loop, and sliding-window perplexity evaluation.

pub mod checkpoint;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod rope;
pub mod train;

pub use eval::{eval_perplexity, PplReport};
pub use model::{Model, ModelConfig};
pub use rope::{rope_angle, rope_apply};
pub use train::{train, TrainConfig, TrainState};
