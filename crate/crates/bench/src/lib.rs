//! Benchmark harness comparing inversion methods on Gaussian-mixture editing
//! tasks with exact score oracles.

pub mod config;
pub mod emit;
pub mod error;
pub mod gap;
pub mod metrics;
pub mod run;
pub mod sweep;
pub mod task;

pub use config::BenchConfig;
pub use emit::{count_svg_points, csv_string, emit_csv, emit_json, emit_svg_scatter, read_json, svg_scatter};
pub use error::{BenchError, Result};
pub use gap::{run_gap_analysis, GapAnalysis};
pub use run::{aggregate_rows, median, run_benchmark, run_benchmark_with, BenchReport, MethodAggregate, Row};
pub use sweep::{run_sweep, SweepReport};
pub use task::{generate_tasks, EditTask};
