//! Label-matching accuracy, per-class metrics and the throughput harness.

mod bench;
mod cases;
mod metrics;
mod report;

pub use bench::{bench_generate, BenchResult};
pub use cases::{
    match_label, match_label_ids, normalize_text, read_cases, write_cases, EvalCase, DEFAULT_K,
};
pub use metrics::{evaluate, summarize, CaseOutcome, ClassMetrics, EvalSummary};
pub use report::{emit_bench_report, emit_eval_report};
