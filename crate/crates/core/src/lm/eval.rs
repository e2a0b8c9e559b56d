//! Sliding-window perplexity evaluation.
//!
//! The first window scores all of its context-many predictions;
//! each subsequent window advances by the stride and scores only its
//! final stride-many predictions. Trailing tokens that do not fill a
//! full window are left unscored.

use crate::error::{Error, Result};
use crate::lm::model::{row_nll, Model};

/// Result of one perplexity run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PplReport {
    pub context: usize,
    pub stride: usize,
    pub scored_tokens: usize,
    pub total_nll: f64,
    pub perplexity: f64,
}

impl PplReport {
    pub const CSV_HEADER: &'static str = "context,stride,tokens,nll,ppl";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.context, self.stride, self.scored_tokens, self.total_nll, self.perplexity
        )
    }
}

/// Score a token stream with a sliding window of `context` tokens
/// advancing by `stride`. Perplexity is `exp(total NLL / scored)`.
pub fn eval_perplexity(
    model: &Model,
    tokens: &[u8],
    context: usize,
    stride: usize,
) -> Result<PplReport> {
    if stride == 0 || stride > context {
        return Err(Error::config(format!(
            "stride {stride} must be in [1, context {context}]"
        )));
    }
    if tokens.len() <= context {
        return Err(Error::config(format!(
            "need more than {context} tokens to evaluate, got {}",
            tokens.len()
        )));
    }
    let t = tokens.len();
    let mut total_nll = 0.0;
    let mut scored = 0usize;
    let mut start = 0usize;
    while start + context <= t - 1 {
        let window = &tokens[start..start + context];
        let logits = model.logits(window)?;
        // logits row r predicts the corpus token at start + r + 1
        let first_row = if start == 0 { 0 } else { context - stride };
        for r in first_row..context {
            let target = tokens[start + r + 1] as usize;
            if target >= model.cfg.vocab {
                return Err(Error::config(format!(
                    "token id {target} exceeds vocab {}",
                    model.cfg.vocab
                )));
            }
            total_nll += row_nll(&logits, r, target);
            scored += 1;
        }
        start += stride;
    }
    Ok(PplReport {
        context,
        stride,
        scored_tokens: scored,
        total_nll,
        perplexity: (total_nll / scored as f64).exp(),
    })
}
