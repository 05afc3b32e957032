//! Cost analysis: analytic FLOPs, wall-clock timing and ablation sweeps.

mod ablation;
mod bench;
mod flops;

pub use ablation::{ablation_configs, ablation_matrix, describe, parse_axes, write_ablation, AblationRow, Axis};
pub use bench::{bench_time, median, BenchConfig, BenchResult, MIN_REPEATS, MIN_WARMUPS};
pub use flops::{gai_records, FlopsReport, OpRecord, CONVENTION};
