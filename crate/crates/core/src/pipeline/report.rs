//! Episode accounting: counters, the skip log, and coarse per-stage timing.
//! The report carries every timing field so manifests stay byte-comparable.

use crate::store::manifest::SkipRecord;
use serde::Serialize;
use std::collections::BTreeMap;
use std::time::Duration;

/// Histogram bucket upper bounds, milliseconds; the last bucket is open.
pub const HISTOGRAM_BOUNDS_MS: [f64; 11] =
    [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StageTiming {
    pub count: u64,
    pub total_ms: f64,
    /// Counts per bucket of `HISTOGRAM_BOUNDS_MS`, plus one overflow bucket.
    pub histogram_counts: Vec<u64>,
}

impl Default for StageTiming {
    fn default() -> Self {
        StageTiming {
            count: 0,
            total_ms: 0.0,
            histogram_counts: vec![0; HISTOGRAM_BOUNDS_MS.len() + 1],
        }
    }
}

impl StageTiming {
    pub fn record(&mut self, elapsed: Duration) {
        let ms = elapsed.as_secs_f64() * 1000.0;
        self.count += 1;
        self.total_ms += ms;
        let bucket = HISTOGRAM_BOUNDS_MS
            .iter()
            .position(|&b| ms <= b)
            .unwrap_or(HISTOGRAM_BOUNDS_MS.len());
        self.histogram_counts[bucket] += 1;
    }

    pub fn merge(&mut self, other: &StageTiming) {
        self.count += other.count;
        self.total_ms += other.total_ms;
        for (a, b) in self.histogram_counts.iter_mut().zip(&other.histogram_counts) {
            *a += b;
        }
    }
}

/// Per-thread timing collector, merged into the report at join time.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct StageClock {
    pub stages: BTreeMap<&'static str, StageTiming>,
}

impl StageClock {
    pub fn record(&mut self, stage: &'static str, elapsed: Duration) {
        self.stages.entry(stage).or_default().record(elapsed);
    }

    pub fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> T) -> T {
        let start = std::time::Instant::now();
        let out = f();
        self.record(stage, start.elapsed());
        out
    }

    pub fn merge(&mut self, other: &StageClock) {
        for (k, v) in &other.stages {
            self.stages.entry(k).or_default().merge(v);
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EpisodeReport {
    pub mode: String,
    pub episode: u32,
    pub frames_requested: u64,
    pub frames_assembled: u64,
    pub frames_skipped: u64,
    pub skips: Vec<SkipRecord>,
    pub stale_payloads_discarded: u64,
    /// Deepest per-sensor queue observed (bounded-memory witness).
    pub max_queue_depth: usize,
    /// First tick to manifest close.
    pub wall_time_s: f64,
    pub aborted: bool,
    pub abort_reason: Option<String>,
    pub stage_timing: BTreeMap<String, StageTiming>,
}

impl EpisodeReport {
    pub fn counters_consistent(&self) -> bool {
        self.frames_requested == self.frames_assembled + self.frames_skipped
    }

    pub fn save(&self, episode_root: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(
            episode_root.join("report.json"),
            serde_json::to_string_pretty(self).expect("report serializes"),
        )
    }
}
