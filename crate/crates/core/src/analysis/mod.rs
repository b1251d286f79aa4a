//! Activation analyses, per-cluster evaluation, benchmarking and exports.

mod bench;
mod eval;
mod export;
mod patterns;

pub use bench::{
    confidence_cdf, latency_vs_retention, route_traces, spearman, threshold_sweep, BenchmarkRecord, LatencyStats, RetentionLatency,
    RouteTrace, ThresholdReport,
};
pub use eval::{per_cluster_eval, write_cluster_eval, ClusterEvalRow};
pub use export::{export_features, write_features};
pub use patterns::{activation_pattern, default_top_k, filter_sharing, SharingProfile, DEFAULT_ACTIVATION_QUANTILE};
