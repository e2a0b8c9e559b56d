//! Closed-form multiply-add cost model for every pattern, cross-checked
//! in tests against the kernels' instrumented counters.

use crate::error::Result;
use crate::pattern::{build_head_plans, AttnConfig, HeadPlan, PatternSpec};

/// Multiply-add counts for one attention layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopEstimate {
    /// Q·K^T multiply-adds across all heads.
    pub score_mas: u64,
    /// Attention-weighted value-sum multiply-adds across all heads.
    pub weighted_sum_mas: u64,
    pub total_mas: u64,
    /// Total relative to dense attention at the same shape; 1.0 for full.
    pub ratio_to_full: f64,
}

/// Score-side multiply-adds of one head for one batch element.
fn head_score_mas(plan: &HeadPlan, cfg: &AttnConfig) -> u64 {
    let n = cfg.seq_len as u64;
    let d = cfg.head_dim as u64;
    match *plan {
        HeadPlan::Local | HeadPlan::ShiftedChunk { .. } => {
            let w = cfg.window as u64;
            (n / w) * w * w * d
        }
        HeadPlan::Dilated { theta, .. } => {
            let ns = n / theta as u64;
            ns * ns * d
        }
    }
}

/// Closed-form cost of a pattern at a given shape. Masking is not
/// discounted: kernels compute every score entry of their sparse
/// structure and mask afterwards, in causal mode too.
pub fn flop_estimate(spec: &PatternSpec, cfg: &AttnConfig) -> Result<FlopEstimate> {
    let b = cfg.batch as u64;
    let n = cfg.seq_len as u64;
    let d = cfg.head_dim as u64;
    let score_mas: u64 = match spec {
        PatternSpec::S2 { window } => {
            // every head is chunked; the roll does not change the count
            let w = *window as u64;
            if cfg.seq_len % window != 0 {
                return Err(crate::error::Error::config(format!(
                    "window {window} does not divide seq_len {}",
                    cfg.seq_len
                )));
            }
            b * cfg.heads as u64 * (n / w) * w * w * d
        }
        other => {
            let plans = build_head_plans(other, cfg)?;
            b * plans
                .iter()
                .map(|p| head_score_mas(p, cfg))
                .sum::<u64>()
        }
    };
    let weighted_sum_mas = score_mas;
    let total_mas = score_mas + weighted_sum_mas;
    let full_total = 2 * b * cfg.heads as u64 * n * n * d;
    Ok(FlopEstimate {
        score_mas,
        weighted_sum_mas,
        total_mas,
        ratio_to_full: total_mas as f64 / full_total as f64,
    })
}
