//! Latency-run orchestration and run artifacts (`samples.csv`,
//! `run.json`, optional `trace.csv`).

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use rrsb_core::netem::{NetProfile, TraceEvent, TraceKind};
use rrsb_core::paths::{run_path, LatencySample, RunConfig, RunCounters, RunResult};

use crate::stats::{LatencyStats, StatsError};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("run failed: {0}")]
    Run(rrsb_core::paths::RunError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad argument: {0}")]
    BadArg(String),
}

impl From<rrsb_core::paths::RunError> for BenchError {
    fn from(e: rrsb_core::paths::RunError) -> Self {
        BenchError::Run(e)
    }
}

/// Everything `run.json` records about one latency run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub path: String,
    pub profile_name: String,
    pub profile: NetProfile,
    pub duration_s: f64,
    pub seed: u64,
    pub realtime: bool,
    pub segment_s: f64,
    pub fragment_s: f64,
    pub buffer_target_s: f64,
    pub jitter_target_ms: u64,
    pub counters: RunCounters,
    pub stats: LatencyStats,
    pub clock_offset_true_us: i64,
    pub clock_offset_est_us: i64,
}

/// Runs one virtual-time latency benchmark and reduces it to stats.
pub fn bench_latency(cfg: &RunConfig) -> Result<(LatencyStats, RunResult), BenchError> {
    let result = run_path(cfg)?;
    let stats = LatencyStats::from_samples(&result.samples, &result.counters)?;
    Ok((stats, result))
}

pub fn make_record(
    cfg: &RunConfig,
    profile_name: &str,
    realtime: bool,
    stats: &LatencyStats,
    result: &RunResult,
) -> RunRecord {
    RunRecord {
        path: cfg.path.as_str().to_string(),
        profile_name: profile_name.to_string(),
        profile: cfg.profile,
        duration_s: cfg.duration_s,
        seed: cfg.seed,
        realtime,
        segment_s: cfg.mpd.segment_duration_s,
        fragment_s: cfg.mpd.fragment_duration_s,
        buffer_target_s: cfg.player.buffer_target_s,
        jitter_target_ms: cfg.player.jitter.target_delay_ms,
        counters: result.counters,
        stats: *stats,
        clock_offset_true_us: result.clock_offset_true_us,
        clock_offset_est_us: result.clock_offset_est_us,
    }
}

/// `samples.csv`: one row per delivered frame, integer microseconds.
pub fn render_samples_csv(samples: &[LatencySample]) -> String {
    let mut out = String::from("seq,capture_us,display_us,latency_us\n");
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.seq, s.capture_ts_us, s.display_ts_us, s.latency_us
        ));
    }
    out
}

pub fn write_samples_csv(path: &Path, samples: &[LatencySample]) -> io::Result<()> {
    let mut file = io::BufWriter::new(fs::File::create(path)?);
    file.write_all(render_samples_csv(samples).as_bytes())?;
    file.flush()
}

pub fn write_run_json(path: &Path, record: &RunRecord) -> io::Result<()> {
    let json = serde_json::to_string_pretty(record).expect("record serializes");
    fs::write(path, json)
}

pub fn read_run_json(path: &Path) -> Result<RunRecord, BenchError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| BenchError::BadArg(format!("{}: {e}", path.display())))
}

/// Link event log as `ts_us,event,bytes` rows.
pub fn render_trace_csv(events: &[TraceEvent]) -> String {
    let mut out = String::from("ts_us,event,bytes\n");
    for e in events {
        let kind = match e.kind {
            TraceKind::Send => "send",
            TraceKind::Deliver => "deliver",
            TraceKind::Drop => "drop",
            TraceKind::Reorder => "reorder",
        };
        out.push_str(&format!("{},{},{}\n", e.ts_us, kind, e.bytes));
    }
    out
}

pub fn write_trace_csv(path: &Path, events: &[TraceEvent]) -> io::Result<()> {
    fs::write(path, render_trace_csv(events))
}
