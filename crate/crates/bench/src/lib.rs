//! Capture benchmarks: synthetic workloads across the volatility spectrum,
//! execution-time overhead and storage growth.

pub mod harness;
pub mod programs;
pub mod workload;

pub use harness::{
    measure_storage, run_bench, run_mode, sweep_volatility, BenchConfig, BenchError, BenchReport,
    Mode, StorageSplit, SweepReport,
};
pub use programs::random_program;
pub use workload::{Plan, Workload};
