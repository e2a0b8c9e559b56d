//! Wall-clock benchmark harness with deterministic input generation.
//!
//! Kernel execution is serial; the only optional parallelism is in
//! generating the input tensors, which draws from three independent
//! seeded streams and is therefore bit-identical either way.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::flops::flop_estimate;
use crate::error::{Error, Result};
use crate::kernels::forward_spec;
use crate::pattern::{AttnConfig, PatternSpec};
use crate::tensor::{Element, Precision, Tensor};

/// One benchmark measurement.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub pattern: String,
    pub n: usize,
    pub w_or_theta: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub precision: Precision,
    pub reps: usize,
    pub mean_ns: f64,
    pub std_ns: f64,
    pub total_mas: u64,
    pub ratio_to_full: f64,
    /// Set when the measurement looks too close to timer resolution.
    pub warning: Option<String>,
}

pub const BENCH_CSV_HEADER: &str =
    "pattern,N,w_or_theta,h,D,precision,reps,mean_ns,std_ns,flops,ratio_to_full";

impl BenchRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.pattern,
            self.n,
            self.w_or_theta,
            self.heads,
            self.head_dim,
            self.precision,
            self.reps,
            self.mean_ns,
            self.std_ns,
            self.total_mas,
            self.ratio_to_full
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Generate Q, K, V concurrently. Values are identical either way.
    pub parallel_gen: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            reps: 10,
            warmup: 1,
            seed: 0,
            parallel_gen: false,
        }
    }
}

/// Deterministic Q, K, V for a config: three independent streams of one
/// seeded generator, so the tensors do not depend on generation order.
pub fn gen_qkv<T: Element>(cfg: &AttnConfig, seed: u64) -> [Tensor<T>; 3] {
    let shape = [cfg.batch, cfg.heads, cfg.seq_len, cfg.head_dim];
    let make = |stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Tensor::<T>::randn(&shape, &mut rng)
    };
    [make(0), make(1), make(2)]
}

fn gen_qkv_parallel<T: Element>(cfg: &AttnConfig, seed: u64) -> [Tensor<T>; 3] {
    let shape = [cfg.batch, cfg.heads, cfg.seq_len, cfg.head_dim];
    let make = move |stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Tensor::<T>::randn(&shape, &mut rng)
    };
    let ((q, k), v) = rayon::join(|| rayon::join(|| make(0), || make(1)), || make(2));
    [q, k, v]
}

/// Time one pattern at one shape, warmup iterations excluded.
pub fn bench_pattern<T: Element>(
    spec: &PatternSpec,
    cfg: &AttnConfig,
    opts: &BenchOptions,
) -> Result<BenchRow> {
    if opts.reps < 5 {
        return Err(Error::config(format!(
            "benchmark needs at least 5 repetitions, got {}",
            opts.reps
        )));
    }
    if opts.warmup < 1 {
        return Err(Error::config("benchmark needs at least 1 warmup iteration"));
    }
    let est = flop_estimate(spec, cfg)?;
    let [q, k, v] = if opts.parallel_gen {
        gen_qkv_parallel::<T>(cfg, opts.seed)
    } else {
        gen_qkv::<T>(cfg, opts.seed)
    };
    for _ in 0..opts.warmup {
        let out = forward_spec(spec, cfg, &q, &k, &v, false, false)?;
        std::hint::black_box(&out.out);
    }
    let mut samples = Vec::with_capacity(opts.reps);
    for _ in 0..opts.reps {
        let start = Instant::now();
        let out = forward_spec(spec, cfg, &q, &k, &v, false, false)?;
        let elapsed = start.elapsed().as_nanos() as f64;
        std::hint::black_box(&out.out);
        samples.push(elapsed);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples
        .iter()
        .map(|s| (s - mean) * (s - mean))
        .sum::<f64>()
        / (samples.len() - 1) as f64;
    let warning = if mean < 1_000.0 {
        Some(format!(
            "mean {mean:.0} ns is close to timer resolution; treat with suspicion"
        ))
    } else {
        None
    };
    Ok(BenchRow {
        pattern: spec.label().to_string(),
        n: cfg.seq_len,
        w_or_theta: spec.w_or_theta(),
        heads: cfg.heads,
        head_dim: cfg.head_dim,
        precision: T::PRECISION,
        reps: opts.reps,
        mean_ns: mean,
        std_ns: var.sqrt(),
        total_mas: est.total_mas,
        ratio_to_full: est.ratio_to_full,
        warning,
    })
}
