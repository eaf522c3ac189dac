//! Quality metrics and the regime-comparison benchmark harness.

pub mod harness;
pub mod metrics;
pub mod report;

pub use harness::{
    aggregate, analytic_forced_speedup, forced_decode_steps, run_benchmark, Aggregate,
    BenchConfig, BenchError, ExampleScore, MetricReport, RegimeModels, RegimeRun,
};
pub use metrics::{em_f1, f1_at_k, f1_at_m, normalize, pm_f1, rouge_l, rouge_n, Prf};
