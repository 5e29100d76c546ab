//! The run manifest: the authoritative index of batches, logs, labels, and
//! skips for one episode. Written once at clean close; batch journals inside
//! `raw/<sensor>/` cover the crash case. Timing lives in the episode report,
//! not here, so manifests of identical runs compare bit-equal.

use crate::config::{RunConfig, SensorKind};
use crate::store::batch::BatchEntry;
use crate::store::{io_err, StoreError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLogManifest {
    pub name: String,
    pub file: String,
    pub records: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorManifest {
    pub sensor_id: String,
    pub kind: SensorKind,
    pub width: u32,
    pub height: u32,
    /// Stored channels for image kinds (4), 0 for record sensors.
    pub storage_channels: u32,
    pub frame_size_bytes: u64,
    #[serde(default)]
    pub batches: Vec<BatchEntry>,
    #[serde(default)]
    pub record_log: Option<RecordLogManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub frame_id: u64,
    pub reason: String,
    /// Offending sensor -> what its queue head carried ("absent" or a frame id).
    pub sensors: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsManifest {
    pub dir: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub episode: u32,
    /// Resolved run config; `output_dir` is omitted (it is wherever this
    /// manifest lives), keeping manifests location-independent.
    pub config: serde_json::Value,
    pub frames_requested: u64,
    pub frames_assembled: u64,
    pub frames_skipped: u64,
    /// Inclusive (first, last) runs of assembled frame ids.
    pub assembled_ranges: Vec<(u64, u64)>,
    pub skips: Vec<SkipRecord>,
    pub sensors: Vec<SensorManifest>,
    #[serde(default)]
    pub labels: Option<LabelsManifest>,
    #[serde(default)]
    pub record_logs: Vec<RecordLogManifest>,
}

/// The config as recorded in manifests: resolved values, no output_dir.
pub fn manifest_config_value(cfg: &RunConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    v.as_object_mut().expect("config is an object").remove("output_dir");
    v
}

/// Compress a sorted, deduplicated frame id list into inclusive ranges.
pub fn compress_ranges(frames: &[u64]) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::new();
    for &f in frames {
        match out.last_mut() {
            Some((_, last)) if *last + 1 == f => *last = f,
            _ => out.push((f, f)),
        }
    }
    out
}

pub fn ranges_contain(ranges: &[(u64, u64)], frame: u64) -> bool {
    ranges.iter().any(|&(a, b)| (a..=b).contains(&frame))
}

pub fn ranges_len(ranges: &[(u64, u64)]) -> u64 {
    ranges.iter().map(|&(a, b)| b - a + 1).sum()
}

impl Manifest {
    pub fn save(&self, episode_root: &Path) -> Result<(), StoreError> {
        let path = episode_root.join(MANIFEST_FILE);
        let tmp = episode_root.join(format!("{MANIFEST_FILE}.tmp"));
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&tmp, json).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest, StoreError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| StoreError::Manifest(format!("cannot parse {}: {e}", path.display())))?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(StoreError::Manifest(format!(
                "unsupported manifest format_version {}, expected {MANIFEST_FORMAT_VERSION}",
                m.format_version
            )));
        }
        Ok(m)
    }

    /// Counter and coverage invariants: requested = assembled + skipped, and
    /// per image sensor the batch present counts sum to frames_assembled.
    pub fn verify_completeness(&self) -> Result<(), StoreError> {
        if self.frames_requested != self.frames_assembled + self.frames_skipped {
            return Err(StoreError::Manifest(format!(
                "requested {} != assembled {} + skipped {}",
                self.frames_requested, self.frames_assembled, self.frames_skipped
            )));
        }
        if ranges_len(&self.assembled_ranges) != self.frames_assembled {
            return Err(StoreError::Manifest("assembled_ranges do not cover frames_assembled".into()));
        }
        for s in &self.sensors {
            if s.kind.is_camera() {
                let total: u64 = s.batches.iter().map(|b| b.present_frames).sum();
                if total != self.frames_assembled {
                    return Err(StoreError::Manifest(format!(
                        "sensor {}: batches hold {total} frames, run assembled {}",
                        s.sensor_id, self.frames_assembled
                    )));
                }
            } else if let Some(log) = &s.record_log {
                if log.records != self.frames_assembled {
                    return Err(StoreError::Manifest(format!(
                        "sensor {}: log holds {} records, run assembled {}",
                        s.sensor_id, log.records, self.frames_assembled
                    )));
                }
            }
        }
        Ok(())
    }
}
