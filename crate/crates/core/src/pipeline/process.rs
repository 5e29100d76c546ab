//! Per-bundle work shared verbatim by the pipelined and baseline collectors,
//! so the two modes produce identical bytes by construction.

use crate::annotate::{annotate_frame, count_lidar_hits, emit_labels, AnnotationCamera};
use crate::config::{SensorKind, ValidatedConfig};
use crate::pipeline::matcher::FrameBundle;
use crate::pipeline::PipelineError;
use crate::protocol::{encode_actor_records, ActorRecord, ActorSnapshotMsg};
use crate::world::{ActorClass, LidarScan};
use std::path::{Path, PathBuf};

/// Resolved episode-wide facts both collectors need.
pub struct EpisodeContext {
    pub cfg: ValidatedConfig,
    pub plan: crate::config::TimingPlan,
    pub max_lag: u64,
    /// Index of the annotation camera (first depth sensor), if any.
    pub depth_idx: Option<usize>,
    /// Index of the gating lidar (first lidar sensor), if any.
    pub lidar_idx: Option<usize>,
    pub image_idxs: Vec<usize>,
    pub record_idxs: Vec<usize>,
    pub camera: Option<AnnotationCamera>,
    pub episode_root: PathBuf,
    pub labels_dir: Option<PathBuf>,
}

impl EpisodeContext {
    pub fn new(cfg: &ValidatedConfig, episode_root: &Path) -> Self {
        let plan = crate::config::derive_timing(cfg);
        let depth_idx = cfg.sensors.iter().position(|s| s.kind == SensorKind::Depth);
        let lidar_idx = cfg.sensors.iter().position(|s| s.kind == SensorKind::Lidar);
        let image_idxs = cfg
            .sensors
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind.is_camera())
            .map(|(i, _)| i)
            .collect();
        let record_idxs = cfg
            .sensors
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.kind.is_camera())
            .map(|(i, _)| i)
            .collect();
        let camera = depth_idx.map(|i| AnnotationCamera::new(&cfg.sensors[i]));
        EpisodeContext {
            cfg: cfg.clone(),
            plan,
            max_lag: cfg.sensors.iter().map(|s| s.lag_frames as u64).max().unwrap_or(0),
            depth_idx,
            lidar_idx,
            image_idxs,
            record_idxs,
            camera,
            episode_root: episode_root.to_path_buf(),
            labels_dir: depth_idx.map(|_| episode_root.join("labels")),
        }
    }

    pub fn expected_payload_len(&self, sensor_idx: usize) -> Option<u64> {
        let s = &self.cfg.sensors[sensor_idx];
        match s.kind {
            _ if s.kind.is_camera() => s.frame_size_bytes(),
            SensorKind::Imu => Some(crate::world::ImuReading::WIRE_SIZE as u64),
            SensorKind::Gnss => Some(crate::world::GnssReading::WIRE_SIZE as u64),
            _ => None,
        }
    }
}

/// Annotate one bundle into the label file body. `None` when the run has no
/// annotation camera.
pub fn annotate_bundle(
    ctx: &EpisodeContext,
    bundle: &FrameBundle,
) -> Result<Option<String>, PipelineError> {
    let (Some(depth_idx), Some(camera)) = (ctx.depth_idx, ctx.camera.as_ref()) else {
        return Ok(None);
    };
    let spec = &ctx.cfg.sensors[depth_idx];
    let depth = crate::annotate::decode_depth_rgba(
        spec.width,
        spec.height,
        &bundle.payloads[depth_idx],
    )
    .map_err(|e| PipelineError::BadPayload(format!("frame {}: {e}", bundle.frame_id)))?;

    let lidar_hits = match ctx.lidar_idx {
        Some(li) => {
            let scan = LidarScan::from_le_bytes(&bundle.payloads[li]).ok_or_else(|| {
                PipelineError::BadPayload(format!("frame {}: bad lidar payload", bundle.frame_id))
            })?;
            Some(count_lidar_hits(&scan))
        }
        None => None,
    };

    let records = annotate_frame(
        bundle.frame_id,
        &bundle.snapshot.actors,
        camera,
        &depth,
        lidar_hits.as_ref(),
        ctx.cfg.min_lidar_points,
        ctx.cfg.max_distance_m,
    );
    Ok(Some(emit_labels(&records)))
}

/// Write one frame's label file (created even when empty).
pub fn write_label_file(labels_dir: &Path, frame_id: u64, body: &str) -> std::io::Result<()> {
    std::fs::write(labels_dir.join(format!("{frame_id:08}.txt")), body)
}

/// Ground-truth record for the classes whose save flag is set; None when both
/// flags are off. All actors of the class are recorded, unfiltered.
pub fn gt_record_bytes(ctx: &EpisodeContext, snapshot: &ActorSnapshotMsg) -> Option<Vec<u8>> {
    if !ctx.cfg.save_vehicle_gt && !ctx.cfg.save_pedestrian_gt {
        return None;
    }
    let actors: Vec<ActorRecord> = snapshot
        .actors
        .iter()
        .filter(|a| match a.class {
            ActorClass::Vehicle => ctx.cfg.save_vehicle_gt,
            ActorClass::Pedestrian => ctx.cfg.save_pedestrian_gt,
            ActorClass::Ego => false,
        })
        .copied()
        .collect();
    Some(encode_actor_records(&actors))
}

/// Ego pose/velocity record when `save_ego_motion` is set.
pub fn ego_record_bytes(ctx: &EpisodeContext, snapshot: &ActorSnapshotMsg) -> Option<Vec<u8>> {
    if !ctx.cfg.save_ego_motion {
        return None;
    }
    let ego: Vec<ActorRecord> = snapshot
        .actors
        .iter()
        .filter(|a| a.class == ActorClass::Ego)
        .copied()
        .collect();
    Some(encode_actor_records(&ego))
}
