//! Accounting and observability: analytic MAC/parameter counts, wall-clock
//! throughput, and CSV emission for traces and training metrics.

pub mod bench;
pub mod flops;
pub mod trace;

pub use bench::{bench_throughput, cls_only_after, max_threads, BenchResult};
pub use flops::{count_flops, count_flops_dense, count_params, FlopEntry, FlopLedger};
pub use trace::{
    emit_trace, events_from_records, write_metrics_header, write_metrics_row, MetricsRow,
    TraceEvent, METRICS_HEADER, TRACE_HEADER,
};
