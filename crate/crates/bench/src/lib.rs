//! Benchmark harness around the core protocol stacks: ingestion-mode
//! throughput measurement, latency runs (virtual-time and realtime),
//! aggregate statistics, and report rendering.

pub mod config;
pub mod ingest;
pub mod realtime;
pub mod runner;
pub mod stats;
