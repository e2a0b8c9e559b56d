//! Declarative descriptions of attention patterns, the per-head plans
//! they lower to, and the compiler from pattern to ground-truth boolean
//! attention masks.
//!
//! The mask is the semantic contract: every sparse kernel must agree
//! with dense attention driven by the mask built here.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Shape-and-mode contract validated by every kernel entry point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnConfig {
    pub batch: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
    /// Tokens per chunk for chunked patterns.
    pub window: usize,
    pub causal: bool,
}

impl AttnConfig {
    pub fn new(
        batch: usize,
        heads: usize,
        seq_len: usize,
        head_dim: usize,
        window: usize,
        causal: bool,
    ) -> Result<Self> {
        for (name, v) in [
            ("batch", batch),
            ("heads", heads),
            ("seq_len", seq_len),
            ("head_dim", head_dim),
            ("window", window),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1, got 0")));
            }
        }
        Ok(AttnConfig {
            batch,
            heads,
            seq_len,
            head_dim,
            window,
            causal,
        })
    }

    /// Chunk count `m = N / w`; errors when the window does not divide
    /// the sequence length.
    pub fn chunks(&self) -> Result<usize> {
        if self.seq_len % self.window != 0 {
            return Err(Error::config(format!(
                "window {} does not divide seq_len {}",
                self.window, self.seq_len
            )));
        }
        Ok(self.seq_len / self.window)
    }
}

/// What a single attention head computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadPlan {
    /// Attend within the head's own chunk.
    Local,
    /// Attend within the chunk after keys/values are rolled right by
    /// `shift` tokens.
    ShiftedChunk { shift: usize },
    /// Attend among the positions congruent to `offset - 1` mod `theta`.
    Dilated { theta: usize, offset: usize },
}

/// A whole layer's attention pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternSpec {
    Full,
    Local { window: usize },
    /// Baseline that rolls queries, keys, and values together by half a
    /// chunk in half of the heads, moving the window partition itself.
    S2 { window: usize },
    /// Half the heads local, half against keys rolled by `window / 2`.
    SccaFixed { window: usize },
    /// Head group `i` attends against keys rolled by `i * window`.
    SccaFlow { window: usize },
    /// Every head dilated with offsets cycling `1..=theta`.
    Sda { theta: usize },
    /// Explicit per-head mixture.
    LongMixed { window: usize, plans: Vec<HeadPlan> },
}

impl PatternSpec {
    /// Default per-head mixture: a quarter of the heads run dilation 2,
    /// half run dilation 4, and the rest split between shifted-chunk
    /// and local heads. The dilation-4 group is rounded down to an even
    /// size so its offsets can cycle.
    pub fn long_mixed_default(heads: usize, window: usize) -> Result<PatternSpec> {
        if heads == 0 {
            return Err(Error::config("long_mixed needs at least one head"));
        }
        let sda2 = heads / 4;
        let sda4 = 2 * (heads / 4);
        let rest = heads - sda2 - sda4;
        let mut plans = Vec::with_capacity(heads);
        for i in 0..sda2 {
            plans.push(HeadPlan::Dilated {
                theta: 2,
                offset: (i % 2) + 1,
            });
        }
        for i in 0..sda4 {
            plans.push(HeadPlan::Dilated {
                theta: 4,
                offset: (i % 4) + 1,
            });
        }
        let shifted = rest.div_ceil(2);
        for i in 0..rest {
            if i < shifted {
                plans.push(HeadPlan::ShiftedChunk { shift: window / 2 });
            } else {
                plans.push(HeadPlan::Local);
            }
        }
        Ok(PatternSpec::LongMixed { window, plans })
    }

    /// Short name used in CSV output and CLI flags.
    pub fn label(&self) -> &'static str {
        match self {
            PatternSpec::Full => "full",
            PatternSpec::Local { .. } => "local",
            PatternSpec::S2 { .. } => "s2",
            PatternSpec::SccaFixed { .. } => "scca_fixed",
            PatternSpec::SccaFlow { .. } => "scca_flow",
            PatternSpec::Sda { .. } => "sda",
            PatternSpec::LongMixed { .. } => "longmixed",
        }
    }

    /// Chunk window, when the pattern has one.
    pub fn window(&self) -> Option<usize> {
        match self {
            PatternSpec::Local { window }
            | PatternSpec::S2 { window }
            | PatternSpec::SccaFixed { window }
            | PatternSpec::SccaFlow { window }
            | PatternSpec::LongMixed { window, .. } => Some(*window),
            PatternSpec::Full | PatternSpec::Sda { .. } => None,
        }
    }

    /// Value for the `w_or_theta` CSV column: the window for chunked
    /// patterns, theta for dilated ones, 0 for full attention.
    pub fn w_or_theta(&self) -> usize {
        match self {
            PatternSpec::Sda { theta } => *theta,
            other => other.window().unwrap_or(0),
        }
    }

    /// Compact text tag used by the checkpoint format.
    pub fn to_tag(&self) -> String {
        match self {
            PatternSpec::Full => "full".into(),
            PatternSpec::Local { window } => format!("local:{window}"),
            PatternSpec::S2 { window } => format!("s2:{window}"),
            PatternSpec::SccaFixed { window } => format!("scca_fixed:{window}"),
            PatternSpec::SccaFlow { window } => format!("scca_flow:{window}"),
            PatternSpec::Sda { theta } => format!("sda:{theta}"),
            PatternSpec::LongMixed { window, plans } => {
                let body: Vec<String> = plans
                    .iter()
                    .map(|p| match p {
                        HeadPlan::Local => "l".to_string(),
                        HeadPlan::ShiftedChunk { shift } => format!("s{shift}"),
                        HeadPlan::Dilated { theta, offset } => format!("d{theta}o{offset}"),
                    })
                    .collect();
                format!("longmixed:{window}:{}", body.join(";"))
            }
        }
    }

    /// Parse a tag produced by [`to_tag`](Self::to_tag).
    pub fn from_tag(tag: &str) -> Result<PatternSpec> {
        let bad = |t: &str| Error::Format(format!("unrecognized pattern tag `{t}`"));
        let mut parts = tag.splitn(3, ':');
        let name = parts.next().ok_or_else(|| bad(tag))?;
        let parse_num = |s: Option<&str>| -> Result<usize> {
            s.ok_or_else(|| bad(tag))?
                .parse::<usize>()
                .map_err(|_| bad(tag))
        };
        match name {
            "full" => Ok(PatternSpec::Full),
            "local" => Ok(PatternSpec::Local {
                window: parse_num(parts.next())?,
            }),
            "s2" => Ok(PatternSpec::S2 {
                window: parse_num(parts.next())?,
            }),
            "scca_fixed" => Ok(PatternSpec::SccaFixed {
                window: parse_num(parts.next())?,
            }),
            "scca_flow" => Ok(PatternSpec::SccaFlow {
                window: parse_num(parts.next())?,
            }),
            "sda" => Ok(PatternSpec::Sda {
                theta: parse_num(parts.next())?,
            }),
            "longmixed" => {
                let window = parse_num(parts.next())?;
                let body = parts.next().ok_or_else(|| bad(tag))?;
                let mut plans = Vec::new();
                for item in body.split(';') {
                    if item == "l" {
                        plans.push(HeadPlan::Local);
                    } else if let Some(rest) = item.strip_prefix('s') {
                        plans.push(HeadPlan::ShiftedChunk {
                            shift: rest.parse().map_err(|_| bad(tag))?,
                        });
                    } else if let Some(rest) = item.strip_prefix('d') {
                        let (t, o) = rest.split_once('o').ok_or_else(|| bad(tag))?;
                        plans.push(HeadPlan::Dilated {
                            theta: t.parse().map_err(|_| bad(tag))?,
                            offset: o.parse().map_err(|_| bad(tag))?,
                        });
                    } else {
                        return Err(bad(tag));
                    }
                }
                Ok(PatternSpec::LongMixed { window, plans })
            }
            _ => Err(bad(tag)),
        }
    }
}

fn check_window(cfg: &AttnConfig, window: usize) -> Result<usize> {
    if window != cfg.window {
        return Err(Error::config(format!(
            "pattern window {window} disagrees with config window {}",
            cfg.window
        )));
    }
    if window == 0 || cfg.seq_len % window != 0 {
        return Err(Error::config(format!(
            "window {window} does not divide seq_len {}",
            cfg.seq_len
        )));
    }
    Ok(cfg.seq_len / window)
}

fn check_plan(plan: &HeadPlan, cfg: &AttnConfig) -> Result<()> {
    match *plan {
        HeadPlan::Local => Ok(()),
        HeadPlan::ShiftedChunk { shift } => {
            if shift >= cfg.seq_len {
                Err(Error::config(format!(
                    "shift {shift} must be < seq_len {}",
                    cfg.seq_len
                )))
            } else {
                Ok(())
            }
        }
        HeadPlan::Dilated { theta, offset } => {
            if theta == 0 || theta > cfg.seq_len {
                return Err(Error::config(format!(
                    "dilation {theta} must be in [1, seq_len {}]",
                    cfg.seq_len
                )));
            }
            if cfg.seq_len % theta != 0 {
                return Err(Error::config(format!(
                    "dilation {theta} does not divide seq_len {}",
                    cfg.seq_len
                )));
            }
            if offset == 0 || offset > theta {
                return Err(Error::config(format!(
                    "dilation offset {offset} must be in [1, {theta}]"
                )));
            }
            Ok(())
        }
    }
}

/// Lower a pattern to one plan per head.
///
/// `Full` lowers to dilation 1 (every token selected, every head
/// global). `S2` is not plan-representable because it moves the window
/// partition itself; it has a dedicated kernel and mask.
pub fn build_head_plans(spec: &PatternSpec, cfg: &AttnConfig) -> Result<Vec<HeadPlan>> {
    let plans = match spec {
        PatternSpec::Full => vec![HeadPlan::Dilated { theta: 1, offset: 1 }; cfg.heads],
        PatternSpec::Local { window } => {
            check_window(cfg, *window)?;
            vec![HeadPlan::Local; cfg.heads]
        }
        PatternSpec::S2 { .. } => {
            return Err(Error::config(
                "s2 moves the window partition itself and has no per-head plan form",
            ))
        }
        PatternSpec::SccaFixed { window } => {
            check_window(cfg, *window)?;
            if window % 2 != 0 {
                return Err(Error::config(format!(
                    "scca_fixed needs an even window, got {window}"
                )));
            }
            let g = window / 2;
            let mut plans = Vec::with_capacity(cfg.heads);
            // Shifted heads come first, then local heads.
            for i in 0..cfg.heads {
                if i < cfg.heads / 2 {
                    plans.push(HeadPlan::ShiftedChunk { shift: g });
                } else {
                    plans.push(HeadPlan::Local);
                }
            }
            plans
        }
        PatternSpec::SccaFlow { window } => {
            let m = check_window(cfg, *window)?;
            // t heads per shift distance; heads left over when m does not
            // divide h fall back to shift 0.
            let t = cfg.heads / m;
            let mut plans = Vec::with_capacity(cfg.heads);
            for i in 0..cfg.heads {
                let shift = if t > 0 && i < t * m {
                    (i / t) * window
                } else {
                    0
                };
                plans.push(HeadPlan::ShiftedChunk { shift });
            }
            plans
        }
        PatternSpec::Sda { theta } => (0..cfg.heads)
            .map(|i| HeadPlan::Dilated {
                theta: *theta,
                offset: (i % theta) + 1,
            })
            .collect(),
        PatternSpec::LongMixed { window, plans } => {
            check_window(cfg, *window)?;
            if plans.len() != cfg.heads {
                return Err(Error::config(format!(
                    "longmixed has {} plans but config has {} heads",
                    plans.len(),
                    cfg.heads
                )));
            }
            plans.clone()
        }
    };
    for plan in &plans {
        check_plan(plan, cfg)?;
    }
    Ok(plans)
}

/// Per-head boolean attendability matrix `M[head][q][k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    heads: usize,
    seq_len: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    fn all_false(heads: usize, seq_len: usize) -> Self {
        AttentionMask {
            heads,
            seq_len,
            bits: vec![false; heads * seq_len * seq_len],
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[inline]
    pub fn get(&self, head: usize, q: usize, k: usize) -> bool {
        self.bits[(head * self.seq_len + q) * self.seq_len + k]
    }

    #[inline]
    fn set(&mut self, head: usize, q: usize, k: usize, value: bool) {
        self.bits[(head * self.seq_len + q) * self.seq_len + k] = value;
    }

    /// Keys attendable from `q` in `head`.
    pub fn allowed_keys(&self, head: usize, q: usize) -> Vec<usize> {
        (0..self.seq_len).filter(|&k| self.get(head, q, k)).collect()
    }

    /// OR of all heads: `true` when any head lets `q` attend `k`.
    pub fn head_union(&self) -> Vec<bool> {
        let n = self.seq_len;
        let mut u = vec![false; n * n];
        for head in 0..self.heads {
            for q in 0..n {
                for k in 0..n {
                    if self.get(head, q, k) {
                        u[q * n + k] = true;
                    }
                }
            }
        }
        u
    }

    /// One head rendered as a plain PGM (P2) image: 255 = attendable,
    /// 0 = blocked. Row = query, column = key.
    pub fn to_pgm(&self, head: usize) -> String {
        let n = self.seq_len;
        let mut out = String::new();
        let _ = writeln!(out, "P2");
        let _ = writeln!(out, "{n} {n}");
        let _ = writeln!(out, "255");
        for q in 0..n {
            let row: Vec<&str> = (0..n)
                .map(|k| if self.get(head, q, k) { "255" } else { "0" })
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    /// All attendable triples as CSV lines `head,q,k`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("head,q,k\n");
        for head in 0..self.heads {
            for q in 0..self.seq_len {
                for k in 0..self.seq_len {
                    if self.get(head, q, k) {
                        let _ = writeln!(out, "{head},{q},{k}");
                    }
                }
            }
        }
        out
    }

    /// Write one PGM per head plus a CSV of triples into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for head in 0..self.heads {
            let path = dir.join(format!("head_{head:03}.pgm"));
            fs::write(path, self.to_pgm(head))?;
        }
        fs::write(dir.join("mask.csv"), self.to_csv())?;
        Ok(())
    }
}

/// Compile a pattern to its ground-truth mask.
///
/// Shifted-chunk heads: `q` may attend `k` iff the rolled position of
/// `k` lands in `q`'s chunk, i.e. `floor(q/w) == floor(((k+shift) mod N)/w)`.
/// Dilated heads: both `q` and `k` must lie in the head's congruence
/// class. Causal mode additionally requires `k <= q` in original
/// positions.
pub fn build_mask(spec: &PatternSpec, cfg: &AttnConfig) -> Result<AttentionMask> {
    let n = cfg.seq_len;
    let mut mask = AttentionMask::all_false(cfg.heads, n);
    match spec {
        PatternSpec::S2 { window } => {
            let m = check_window(cfg, *window)?;
            let _ = m;
            if window % 2 != 0 {
                return Err(Error::config(format!(
                    "s2 needs an even window, got {window}"
                )));
            }
            let g = window / 2;
            for head in 0..cfg.heads {
                let shifted = head < cfg.heads / 2;
                for q in 0..n {
                    for k in 0..n {
                        let same_window = if shifted {
                            ((q + g) % n) / window == ((k + g) % n) / window
                        } else {
                            q / window == k / window
                        };
                        if same_window && (!cfg.causal || k <= q) {
                            mask.set(head, q, k, true);
                        }
                    }
                }
            }
        }
        other => {
            let plans = build_head_plans(other, cfg)?;
            for (head, plan) in plans.iter().enumerate() {
                for q in 0..n {
                    for k in 0..n {
                        let attend = match *plan {
                            HeadPlan::Local => q / cfg.window == k / cfg.window,
                            HeadPlan::ShiftedChunk { shift } => {
                                q / cfg.window == ((k + shift) % n) / cfg.window
                            }
                            HeadPlan::Dilated { theta, offset } => {
                                q % theta == offset - 1 && k % theta == offset - 1
                            }
                        };
                        if attend && (!cfg.causal || k <= q) {
                            mask.set(head, q, k, true);
                        }
                    }
                }
            }
        }
    }
    Ok(mask)
}
