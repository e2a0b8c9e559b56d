//! Multi-layer receptive-field analysis over the attendability graph.
//!
//! Heads are merged by boolean OR (head outputs concatenate and mix
//! through the output projection), and every node gets a self-loop
//! (residual connections carry a token's own state forward). L-layer
//! reachability is then the L-th boolean power of that union matrix.

use crate::pattern::AttentionMask;

/// Coverage statistics for one layer depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerReach {
    pub layer: usize,
    /// Mean over queries of `|reachable set| / N`.
    pub coverage: f64,
    pub min_reach: usize,
    pub max_reach: usize,
}

/// Per-layer information-flow report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachabilityReport {
    pub seq_len: usize,
    pub per_layer: Vec<LayerReach>,
    /// Smallest layer count with full coverage, if reached.
    pub layers_to_full: Option<usize>,
}

/// Rows of an `N x N` boolean matrix packed into u64 words.
struct BitMatrix {
    n: usize,
    words: usize,
    rows: Vec<u64>,
}

impl BitMatrix {
    fn new(n: usize) -> Self {
        let words = n.div_ceil(64);
        BitMatrix {
            n,
            words,
            rows: vec![0; n * words],
        }
    }

    #[inline]
    fn set(&mut self, r: usize, c: usize) {
        self.rows[r * self.words + c / 64] |= 1u64 << (c % 64);
    }

    #[inline]
    fn row(&self, r: usize) -> &[u64] {
        &self.rows[r * self.words..(r + 1) * self.words]
    }

    fn row_popcount(&self, r: usize) -> usize {
        self.row(r).iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Boolean product with `rhs`: out[q] = OR over set bits j of rhs[j].
    fn multiply(&self, rhs: &BitMatrix) -> BitMatrix {
        let mut out = BitMatrix::new(self.n);
        for q in 0..self.n {
            let acc_start = q * self.words;
            for (word_idx, &word) in self.row(q).iter().enumerate() {
                let mut bits = word;
                while bits != 0 {
                    let j = word_idx * 64 + bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    let src = rhs.row(j);
                    for w in 0..self.words {
                        out.rows[acc_start + w] |= src[w];
                    }
                }
            }
        }
        out
    }
}

/// Reachable-set statistics for depths `1..=layers`.
pub fn reachability(mask: &AttentionMask, layers: usize) -> ReachabilityReport {
    let n = mask.seq_len();
    let union = mask.head_union();
    let mut step = BitMatrix::new(n);
    for q in 0..n {
        step.set(q, q);
        for k in 0..n {
            if union[q * n + k] {
                step.set(q, k);
            }
        }
    }

    let mut per_layer = Vec::with_capacity(layers);
    let mut layers_to_full = None;
    let mut reach = BitMatrix::new(n);
    for q in 0..n {
        reach.rows[q * reach.words..(q + 1) * reach.words].copy_from_slice(step.row(q));
    }
    for layer in 1..=layers {
        if layer > 1 {
            reach = reach.multiply(&step);
        }
        let counts: Vec<usize> = (0..n).map(|q| reach.row_popcount(q)).collect();
        let min = counts.iter().copied().min().unwrap_or(0);
        let max = counts.iter().copied().max().unwrap_or(0);
        let coverage =
            counts.iter().map(|&c| c as f64 / n as f64).sum::<f64>() / n as f64;
        if min == n && layers_to_full.is_none() {
            layers_to_full = Some(layer);
        }
        per_layer.push(LayerReach {
            layer,
            coverage,
            min_reach: min,
            max_reach: max,
        });
    }
    ReachabilityReport {
        seq_len: n,
        per_layer,
        layers_to_full,
    }
}
