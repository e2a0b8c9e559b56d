//! Ground-truth oracle, receptive-field analysis, cost model, and
//! benchmark harness.

pub mod bench;
pub mod flops;
pub mod oracle;
pub mod reach;

pub use bench::{bench_pattern, gen_qkv, BenchOptions, BenchRow, BENCH_CSV_HEADER};
pub use flops::{flop_estimate, FlopEstimate};
pub use oracle::masked_full_oracle;
pub use reach::{reachability, LayerReach, ReachabilityReport};
