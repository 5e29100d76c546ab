//! Visibility annotation for one frame bundle: distance filtering, depth
//! decoding, 3D box projection, per-vertex occlusion testing against the
//! depth map, occlusion classes, rotation/observation angles, truncation,
//! lidar point gating, and the label line format.
//!
//! A vertex counts as visible when it projects in front of the camera,
//! inside the image, and its forward depth does not exceed the depth map at
//! its pixel by more than a tolerance `max(0.1 m, 1% of depth)`. The
//! tolerance absorbs depth quantization and sub-pixel sampling at an
//! object's own surface. Vertices outside the image count as not visible and
//! feed both the occlusion class and the truncation ratio.

use crate::config::SensorSpec;
use crate::geometry::{
    bbox2d_from_points, box_vertices, project_to_image, wrap_rad, Bbox2d, CameraIntrinsics,
    OrientedBox, Transform, Vec3,
};
use crate::protocol::ActorRecord;
use crate::world::{ActorClass, DepthImage, LidarScan, BACKGROUND_DEPTH_M};
use std::collections::BTreeMap;
use std::fmt::Write as _;

const DEPTH_CODE_MAX: f64 = (1u32 << 24) as f64 - 1.0;

/// Largest |decode(encode(d)) - d| the 24-bit code can introduce.
pub const DEPTH_QUANTIZATION_M: f64 = BACKGROUND_DEPTH_M / DEPTH_CODE_MAX;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AnnotateError {
    #[error("visible vertex count {0} is out of range 0..=8")]
    BadVertexCount(u8),
    #[error("object at the sensor origin has no defined bearing")]
    AtSensorOrigin,
    #[error("encoded depth buffer has {got} bytes, geometry needs {expected}")]
    BadDepthBuffer { expected: usize, got: usize },
}

/// Per-actor, per-frame label record.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub frame_id: u64,
    pub actor_id: u16,
    pub class: ActorClass,
    pub occlusion: u8,
    pub truncation: f64,
    /// Radians, wrapped to (-pi, pi].
    pub theta_y: f64,
    pub alpha: f64,
    pub bbox2d: Bbox2d,
    pub location_sensor: Vec3,
    /// Full dimensions (2 x extent), meters.
    pub dimensions: Vec3,
    pub distance_m: f64,
    pub visible_vertices: u8,
    pub lidar_points: u32,
}

/// Keep actors whose center is within `max_distance_m` of the ego center.
/// The ego itself is excluded.
pub fn filter_by_distance<'a>(
    actors: &'a [ActorRecord],
    ego_location: Vec3,
    max_distance_m: f64,
) -> Vec<&'a ActorRecord> {
    actors
        .iter()
        .filter(|a| a.class != ActorClass::Ego)
        .filter(|a| a.pose.location.distance(ego_location) <= max_distance_m)
        .collect()
}

/// Decode a 3-channel depth image: `D = 1000·(R + 256·G + 256²·B)/(256³-1)`.
pub fn decode_depth(width: u32, height: u32, rgb: &[u8]) -> Result<DepthImage, AnnotateError> {
    decode_depth_strided(width, height, rgb, 3)
}

/// Decode the 4-byte storage/wire form (code triplet + pad byte per pixel).
pub fn decode_depth_rgba(width: u32, height: u32, rgba: &[u8]) -> Result<DepthImage, AnnotateError> {
    decode_depth_strided(width, height, rgba, 4)
}

fn decode_depth_strided(
    width: u32,
    height: u32,
    data: &[u8],
    stride: usize,
) -> Result<DepthImage, AnnotateError> {
    let npx = width as usize * height as usize;
    if data.len() != npx * stride {
        return Err(AnnotateError::BadDepthBuffer { expected: npx * stride, got: data.len() });
    }
    let mut meters = Vec::with_capacity(npx);
    for px in data.chunks_exact(stride) {
        let code = px[0] as u32 | (px[1] as u32) << 8 | (px[2] as u32) << 16;
        meters.push(BACKGROUND_DEPTH_M * code as f64 / DEPTH_CODE_MAX);
    }
    Ok(DepthImage { width, height, meters })
}

/// Occlusion-test slack for a vertex at forward depth `z`.
pub fn occlusion_tolerance(z: f64) -> f64 {
    (0.01 * z).max(0.1)
}

/// Outcome of the per-vertex visibility test for one box.
#[derive(Debug, Clone, PartialEq)]
pub struct Visibility {
    pub visible_vertices: u8,
    pub occlusion: u8,
    /// None when no vertex projects into the image.
    pub bbox2d: Option<Bbox2d>,
    pub location_sensor: Vec3,
}

/// The depth-map test outcome for one box vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexTest {
    /// Projection (u, v, forward depth) when in front of the camera.
    pub projected: Option<(f64, f64, f64)>,
    pub in_bounds: bool,
    /// Depth map value at the vertex pixel, when in bounds.
    pub sampled_depth: Option<f64>,
    pub visible: bool,
}

/// Per-vertex depth-map visibility for the 8 corners of a world box.
pub fn vertex_tests(
    depth: &DepthImage,
    extrinsic: &Transform,
    intrinsics: &CameraIntrinsics,
    box_world: &OrientedBox,
) -> [VertexTest; 8] {
    let mut out = [VertexTest { projected: None, in_bounds: false, sampled_depth: None, visible: false }; 8];
    for (slot, v) in out.iter_mut().zip(box_vertices(box_world)) {
        let p_sensor = extrinsic.apply(v);
        let Some(ip) = project_to_image(intrinsics, p_sensor) else {
            continue;
        };
        slot.projected = Some((ip.u, ip.v, ip.depth));
        slot.in_bounds = ip.u >= 0.0
            && ip.u < intrinsics.width as f64
            && ip.v >= 0.0
            && ip.v < intrinsics.height as f64;
        if !slot.in_bounds {
            continue;
        }
        let sampled = depth.at(ip.u as u32, ip.v as u32);
        slot.sampled_depth = Some(sampled);
        slot.visible = ip.depth <= sampled + occlusion_tolerance(ip.depth);
    }
    out
}

/// Project the box's 8 vertices into the camera and test each against the
/// depth map. `extrinsic` is the world -> sensor transform.
pub fn is_visible(
    depth: &DepthImage,
    extrinsic: &Transform,
    intrinsics: &CameraIntrinsics,
    box_world: &OrientedBox,
) -> Visibility {
    let tests = vertex_tests(depth, extrinsic, intrinsics, box_world);
    let visible = tests.iter().filter(|t| t.visible).count() as u8;
    let projected: Vec<(f64, f64)> = tests
        .iter()
        .filter_map(|t| t.projected.map(|(u, v, _)| (u, v)))
        .collect();
    Visibility {
        visible_vertices: visible,
        occlusion: classify_occlusion(visible).expect("count <= 8"),
        bbox2d: bbox2d_from_points(&projected, intrinsics.width, intrinsics.height),
        location_sensor: extrinsic.apply(box_world.center),
    }
}

/// 0 when at least six vertices are visible, 1 for four or five, 2 below four.
pub fn classify_occlusion(visible_vertices: u8) -> Result<u8, AnnotateError> {
    match visible_vertices {
        6..=8 => Ok(0),
        4..=5 => Ok(1),
        0..=3 => Ok(2),
        n => Err(AnnotateError::BadVertexCount(n)),
    }
}

/// Rotation angle: `theta_y = yaw_o - yaw_s - 90°`, degrees in, radians out,
/// wrapped to (-pi, pi].
pub fn rotation_angle(yaw_object_deg: f64, yaw_sensor_deg: f64) -> f64 {
    wrap_rad((yaw_object_deg - yaw_sensor_deg - 90.0).to_radians())
}

/// Observation angle: `alpha = theta_y - atan2(lateral, forward)` with
/// forward = sensor-frame x and lateral = sensor-frame y.
pub fn observation_angle(theta_y: f64, location_sensor: Vec3) -> Result<f64, AnnotateError> {
    if location_sensor.x == 0.0 && location_sensor.y == 0.0 {
        return Err(AnnotateError::AtSensorOrigin);
    }
    Ok(wrap_rad(theta_y - location_sensor.y.atan2(location_sensor.x)))
}

/// `(8 - visible) / 8`, in [0, 1].
pub fn truncation_ratio(visible_vertices: u8) -> f64 {
    (8.0 - visible_vertices as f64) / 8.0
}

/// Exact per-actor hit counts; ground hits (id 0) are not actor hits.
pub fn count_lidar_hits(scan: &LidarScan) -> BTreeMap<u16, u32> {
    let mut counts = BTreeMap::new();
    for p in &scan.points {
        if p.actor_id != 0 {
            *counts.entry(p.actor_id).or_insert(0) += 1;
        }
    }
    counts
}

/// Everything the annotator needs about the camera doing the annotating.
pub struct AnnotationCamera {
    pub spec: SensorSpec,
    pub intrinsics: CameraIntrinsics,
}

impl AnnotationCamera {
    pub fn new(spec: &SensorSpec) -> Self {
        AnnotationCamera {
            intrinsics: crate::geometry::intrinsics_from_fov(spec.width, spec.height, spec.fov_deg)
                .expect("validated camera fov"),
            spec: spec.clone(),
        }
    }
}

/// Run the full annotation pass for one frame: distance filter, optional
/// lidar gate, visibility, angles. Survivors are actors with a non-degenerate
/// clipped 2D box, ordered by actor id.
#[allow(clippy::too_many_arguments)]
pub fn annotate_frame(
    frame_id: u64,
    actors: &[ActorRecord],
    camera: &AnnotationCamera,
    depth: &DepthImage,
    lidar_hits: Option<&BTreeMap<u16, u32>>,
    min_lidar_points: u32,
    max_distance_m: f64,
) -> Vec<AnnotationRecord> {
    let Some(ego) = actors.iter().find(|a| a.class == ActorClass::Ego) else {
        return Vec::new();
    };
    let sensor_world = ego
        .pose
        .transform()
        .compose(&camera.spec.mount_pose.pose().transform());
    let extrinsic = sensor_world.inverse();
    let yaw_sensor_deg = sensor_world.rotation_rpy().yaw;

    let mut records = Vec::new();
    for actor in filter_by_distance(actors, ego.pose.location, max_distance_m) {
        let lidar_points = lidar_hits
            .map(|h| h.get(&actor.actor_id).copied().unwrap_or(0))
            .unwrap_or(0);
        if lidar_hits.is_some() && lidar_points < min_lidar_points {
            continue;
        }
        let box_world = OrientedBox::new(actor.pose.location, actor.extent, actor.pose.rotation);
        let vis = is_visible(depth, &extrinsic, &camera.intrinsics, &box_world);
        let Some(bbox2d) = vis.bbox2d else {
            continue;
        };
        if bbox2d.is_degenerate() {
            continue;
        }
        let theta_y = rotation_angle(actor.pose.rotation.yaw, yaw_sensor_deg);
        let Ok(alpha) = observation_angle(theta_y, vis.location_sensor) else {
            continue;
        };
        records.push(AnnotationRecord {
            frame_id,
            actor_id: actor.actor_id,
            class: actor.class,
            occlusion: vis.occlusion,
            truncation: truncation_ratio(vis.visible_vertices),
            theta_y,
            alpha,
            bbox2d,
            location_sensor: vis.location_sensor,
            dimensions: actor.extent.scale(2.0),
            distance_m: actor.pose.location.distance(ego.pose.location),
            visible_vertices: vis.visible_vertices,
            lidar_points,
        });
    }
    records.sort_by_key(|r| r.actor_id);
    records
}

/// One label line: 15 fields, reals with 6 fixed decimals.
pub fn format_label_line(r: &AnnotationRecord) -> String {
    let mut line = String::with_capacity(160);
    write!(
        line,
        "{} {:.6} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
        r.class.label(),
        r.truncation,
        r.occlusion,
        r.alpha,
        r.bbox2d.left,
        r.bbox2d.top,
        r.bbox2d.right,
        r.bbox2d.bottom,
        r.dimensions.z,
        r.dimensions.y,
        r.dimensions.x,
        r.location_sensor.x,
        r.location_sensor.y,
        r.location_sensor.z,
        r.theta_y
    )
    .expect("string write");
    line
}

/// The per-frame label file contents: one newline-terminated line per record.
/// Zero records produce an empty file.
pub fn emit_labels(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format_label_line(r));
        out.push('\n');
    }
    out
}
