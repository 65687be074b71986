//! Aggregate statistics and report rendering.
//!
//! A latency run reduces to average, sample standard deviation and p95
//! over delivered-and-verified frames only; losses and skips are carried
//! as counts beside the distribution. Reports render as markdown (one
//! table per link profile, integer milliseconds), CSV (unrounded), or
//! JSON (round-trippable).

use serde::{Deserialize, Serialize};

use rrsb_core::paths::{LatencySample, RunCounters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub avg_ms: f64,
    /// Sample standard deviation (n - 1).
    pub dev_ms: f64,
    /// Nearest-rank 95th percentile.
    pub p95_ms: f64,
    pub n: u64,
    pub skipped: u64,
    pub lost: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("run delivered no frames")]
    EmptyRun,
}

impl LatencyStats {
    pub fn from_latencies_us(
        latencies_us: &[i64],
        skipped: u64,
        lost: u64,
    ) -> Result<Self, StatsError> {
        if latencies_us.is_empty() {
            return Err(StatsError::EmptyRun);
        }
        let n = latencies_us.len() as f64;
        let mean = latencies_us.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = if latencies_us.len() > 1 {
            latencies_us.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted: Vec<i64> = latencies_us.to_vec();
        sorted.sort_unstable();
        let rank = ((0.95 * n).ceil() as usize).clamp(1, sorted.len());
        Ok(Self {
            avg_ms: mean / 1_000.0,
            dev_ms: var.sqrt() / 1_000.0,
            p95_ms: sorted[rank - 1] as f64 / 1_000.0,
            n: latencies_us.len() as u64,
            skipped,
            lost,
        })
    }

    pub fn from_samples(
        samples: &[LatencySample],
        counters: &RunCounters,
    ) -> Result<Self, StatsError> {
        let latencies: Vec<i64> = samples.iter().map(|s| s.latency_us).collect();
        Self::from_latencies_us(&latencies, counters.skipped, counters.lost)
    }
}

/// One benchmarked (path, profile) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub path: String,
    pub profile: String,
    pub stats: LatencyStats,
}

/// One ingestion-mode throughput measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsRow {
    pub ingest: String,
    pub width: u32,
    pub height: u32,
    pub frames: u64,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub latency: Vec<LatencyRow>,
    pub fps: Vec<FpsRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "md" => Some(ReportFormat::Markdown),
            "csv" => Some(ReportFormat::Csv),
            "json" => Some(ReportFormat::Json),
            _ => None,
        }
    }
}

impl BenchReport {
    /// Stable ordering: profile, then path, then ingest mode.
    pub fn normalize(&mut self) {
        self.latency.sort_by(|a, b| (&a.profile, &a.path).cmp(&(&b.profile, &b.path)));
        self.fps.sort_by(|a, b| {
            (&a.ingest, a.width, a.height).cmp(&(&b.ingest, b.width, b.height))
        });
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Markdown => self.render_markdown(),
            ReportFormat::Csv => self.render_csv(),
            ReportFormat::Json => serde_json::to_string_pretty(self).expect("report serializes"),
        }
    }

    fn render_markdown(&self) -> String {
        let mut out = String::new();
        let mut profiles: Vec<&str> = self.latency.iter().map(|r| r.profile.as_str()).collect();
        profiles.dedup();
        for profile in profiles {
            out.push_str(&format!("### Latency over {profile}\n\n"));
            out.push_str("| Protocol | Latency_avg (ms) | Latency_dev (ms) | p95 (ms) | n | lost | skipped |\n");
            out.push_str("|---|---|---|---|---|---|---|\n");
            for row in self.latency.iter().filter(|r| r.profile == profile) {
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} |\n",
                    row.path,
                    row.stats.avg_ms.round() as i64,
                    row.stats.dev_ms.round() as i64,
                    row.stats.p95_ms.round() as i64,
                    row.stats.n,
                    row.stats.lost,
                    row.stats.skipped,
                ));
            }
            out.push('\n');
        }
        if !self.fps.is_empty() {
            out.push_str("### Maximum ingest throughput\n\n");
            out.push_str("| Ingest | Resolution | Frames | fps |\n|---|---|---|---|\n");
            for row in &self.fps {
                out.push_str(&format!(
                    "| {} | {}x{} | {} | {} |\n",
                    row.ingest,
                    row.width,
                    row.height,
                    row.frames,
                    row.fps.round() as i64,
                ));
            }
            out.push('\n');
        }
        out
    }

    fn render_csv(&self) -> String {
        let mut out = String::from("kind,path_or_ingest,profile_or_resolution,avg_ms,dev_ms,p95_ms,n,lost,skipped,fps\n");
        for row in &self.latency {
            out.push_str(&format!(
                "latency,{},{},{},{},{},{},{},{},\n",
                row.path,
                row.profile,
                row.stats.avg_ms,
                row.stats.dev_ms,
                row.stats.p95_ms,
                row.stats.n,
                row.stats.lost,
                row.stats.skipped,
            ));
        }
        for row in &self.fps {
            out.push_str(&format!(
                "fps,{},{}x{},,,,{},,,{}\n",
                row.ingest, row.width, row.height, row.frames, row.fps
            ));
        }
        out
    }
}
