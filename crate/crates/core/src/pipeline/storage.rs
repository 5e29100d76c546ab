//! Storage bindings for one episode: record-log ownership, manifest
//! assembly, and the per-frame append path used identically by both modes.

use crate::pipeline::process::{ego_record_bytes, gt_record_bytes, EpisodeContext};
use crate::pipeline::report::EpisodeReport;
use crate::protocol::ActorSnapshotMsg;
use crate::store::batch::BatchEntry;
use crate::store::manifest::{
    compress_ranges, manifest_config_value, LabelsManifest, Manifest, RecordLogManifest,
    SensorManifest, SkipRecord, MANIFEST_FORMAT_VERSION,
};
use crate::store::record_log::RecordLogWriter;
use crate::store::StoreError;
use std::sync::Arc;

/// All record-log writers: variable-size sensors plus the gt/ego logs.
/// One owner; both collectors append through this in frame order.
pub struct RecordsWriters {
    per_sensor: Vec<(usize, RecordLogWriter)>,
    gt: Option<RecordLogWriter>,
    ego: Option<RecordLogWriter>,
}

pub const ACTOR_GT_LOG: &str = "actor_gt";
pub const EGO_MOTION_LOG: &str = "ego_motion";

impl RecordsWriters {
    pub fn open(ctx: &EpisodeContext) -> Result<Self, StoreError> {
        let mut per_sensor = Vec::new();
        for &idx in &ctx.record_idxs {
            per_sensor.push((
                idx,
                RecordLogWriter::open(&ctx.episode_root, &ctx.cfg.sensors[idx].sensor_id)?,
            ));
        }
        let gt = if ctx.cfg.save_vehicle_gt || ctx.cfg.save_pedestrian_gt {
            Some(RecordLogWriter::open(&ctx.episode_root, ACTOR_GT_LOG)?)
        } else {
            None
        };
        let ego = if ctx.cfg.save_ego_motion {
            Some(RecordLogWriter::open(&ctx.episode_root, EGO_MOTION_LOG)?)
        } else {
            None
        };
        Ok(RecordsWriters { per_sensor, gt, ego })
    }

    /// Append one assembled frame: each record sensor's payload in config
    /// order, then the ground-truth and ego-motion records.
    pub fn append_frame(
        &mut self,
        ctx: &EpisodeContext,
        frame_id: u64,
        payloads: &[Arc<Vec<u8>>],
        snapshot: &ActorSnapshotMsg,
    ) -> Result<(), StoreError> {
        for (idx, writer) in &mut self.per_sensor {
            writer.append(frame_id, &payloads[*idx])?;
        }
        if let (Some(w), Some(bytes)) = (self.gt.as_mut(), gt_record_bytes(ctx, snapshot)) {
            w.append(frame_id, &bytes)?;
        }
        if let (Some(w), Some(bytes)) = (self.ego.as_mut(), ego_record_bytes(ctx, snapshot)) {
            w.append(frame_id, &bytes)?;
        }
        Ok(())
    }

    /// Flush everything; returns per-sensor log manifests plus gt/ego logs.
    pub fn finish(
        self,
    ) -> Result<(Vec<(usize, RecordLogManifest)>, Vec<RecordLogManifest>), StoreError> {
        let mut sensor_logs = Vec::new();
        for (idx, w) in self.per_sensor {
            let name = w.rel_path().trim_start_matches("logs/").trim_end_matches(".log").to_string();
            let (file, records) = w.finish()?;
            sensor_logs.push((idx, RecordLogManifest { name, file, records }));
        }
        let mut extra = Vec::new();
        if let Some(w) = self.gt {
            let (file, records) = w.finish()?;
            extra.push(RecordLogManifest { name: ACTOR_GT_LOG.into(), file, records });
        }
        if let Some(w) = self.ego {
            let (file, records) = w.finish()?;
            extra.push(RecordLogManifest { name: EGO_MOTION_LOG.into(), file, records });
        }
        Ok((sensor_logs, extra))
    }
}

/// Assemble the manifest from the finished storage parts.
pub struct ManifestParts {
    pub image_batches: Vec<(usize, Vec<BatchEntry>)>,
    pub sensor_logs: Vec<(usize, RecordLogManifest)>,
    pub extra_logs: Vec<RecordLogManifest>,
    pub assembled: Vec<u64>,
    pub skips: Vec<SkipRecord>,
    pub frames_requested: u64,
}

pub fn build_manifest(ctx: &EpisodeContext, episode: u32, parts: &ManifestParts) -> Manifest {
    let sensors = ctx
        .cfg
        .sensors
        .iter()
        .enumerate()
        .map(|(idx, s)| {
            let batches = parts
                .image_batches
                .iter()
                .find(|(i, _)| *i == idx)
                .map(|(_, b)| b.clone())
                .unwrap_or_default();
            let record_log = parts
                .sensor_logs
                .iter()
                .find(|(i, _)| *i == idx)
                .map(|(_, l)| l.clone());
            SensorManifest {
                sensor_id: s.sensor_id.clone(),
                kind: s.kind,
                width: s.width,
                height: s.height,
                storage_channels: if s.kind.is_camera() {
                    crate::config::SensorSpec::IMAGE_CHANNELS
                } else {
                    0
                },
                frame_size_bytes: s.frame_size_bytes().unwrap_or(0),
                batches,
                record_log,
            }
        })
        .collect();

    Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        episode,
        config: manifest_config_value(&ctx.cfg),
        frames_requested: parts.frames_requested,
        frames_assembled: parts.assembled.len() as u64,
        frames_skipped: parts.skips.len() as u64,
        assembled_ranges: compress_ranges(&parts.assembled),
        skips: parts.skips.clone(),
        sensors,
        labels: ctx.labels_dir.as_ref().map(|_| LabelsManifest {
            dir: "labels".into(),
            count: parts.assembled.len() as u64,
        }),
        record_logs: parts.extra_logs.clone(),
    }
}

/// Persist manifest and report; returns the report with final wall time.
pub fn close_episode(
    ctx: &EpisodeContext,
    episode: u32,
    parts: ManifestParts,
    mut report: EpisodeReport,
    started: std::time::Instant,
) -> Result<EpisodeReport, StoreError> {
    let manifest = build_manifest(ctx, episode, &parts);
    manifest.save(&ctx.episode_root)?;
    report.wall_time_s = started.elapsed().as_secs_f64();
    report
        .save(&ctx.episode_root)
        .map_err(crate::store::io_err(ctx.episode_root.join("report.json")))?;
    Ok(report)
}
