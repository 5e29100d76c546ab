//! Analytic rasterizer for the box world. One shared ray-cast pass per camera
//! produces a forward-depth buffer plus a nearest-actor buffer; the depth,
//! instance, and RGB images all derive from that pass, so the per-pixel
//! nearest actor is identical across image kinds by construction.
//!
//! Rays are cast through pixel centers with unnormalized direction
//! `(1, (u-cx)/fx, (cy-v)/fy)`, so the ray parameter *is* the forward (x)
//! depth, matching the projection convention.

use crate::config::SensorSpec;
use crate::geometry::{
    project_to_image, rotation_matrix, CameraIntrinsics, intrinsics_from_fov, Mat3, Transform, Vec3,
};
use crate::hash::splitmix64;
use crate::world::{ActorClass, WorldState, BACKGROUND_DEPTH_M};

/// Per-pixel metric depth in meters, background = 1000.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub meters: Vec<f64>,
}

impl DepthImage {
    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.meters[(y * self.width + x) as usize]
    }
}

/// Slot value marking background pixels in the nearest-actor buffer.
pub const NO_ACTOR: u16 = u16::MAX;

/// A world box prepared for ray casting.
#[derive(Debug, Clone)]
pub struct SceneBox {
    pub actor_id: u16,
    pub class: ActorClass,
    pub center_w: Vec3,
    /// Box local -> world rotation.
    pub rot_w: Mat3,
    pub extent: Vec3,
}

/// All actor boxes except `exclude_id` (the sensor carrier's own box).
pub fn scene_boxes(w: &WorldState, exclude_id: u16) -> Vec<SceneBox> {
    w.actors
        .iter()
        .filter(|a| a.actor_id != exclude_id)
        .map(|a| SceneBox {
            actor_id: a.actor_id,
            class: a.class,
            center_w: a.pose.location,
            rot_w: rotation_matrix(a.pose.rotation),
            extent: a.extent,
        })
        .collect()
}

/// Slab intersection of a ray with an axis box of the given half-extents,
/// in the box's local frame. Returns the entry/exit parameters.
pub(crate) fn slab_intersect(origin: Vec3, dir: Vec3, extent: Vec3) -> Option<(f64, f64)> {
    let mut t_min = f64::NEG_INFINITY;
    let mut t_max = f64::INFINITY;
    for (o, d, e) in [
        (origin.x, dir.x, extent.x),
        (origin.y, dir.y, extent.y),
        (origin.z, dir.z, extent.z),
    ] {
        if d.abs() < 1e-12 {
            if o.abs() > e {
                return None;
            }
        } else {
            let inv = 1.0 / d;
            let (t0, t1) = ((-e - o) * inv, (e - o) * inv);
            let (lo, hi) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
            t_min = t_min.max(lo);
            t_max = t_max.min(hi);
            if t_min > t_max {
                return None;
            }
        }
    }
    Some((t_min, t_max))
}

struct SensorBox {
    slot: u16,
    center_s: Vec3,
    /// Sensor frame -> box local rotation.
    rot_ts: Mat3,
    extent: Vec3,
    /// Pixel rect [x0, x1) x [y0, y1) to scan.
    rect: (u32, u32, u32, u32),
}

/// Depth-forward value and nearest-actor slot per pixel.
pub struct Raster {
    pub width: u32,
    pub height: u32,
    /// Forward-depth per pixel (unclamped), background = +inf.
    pub depth: Vec<f64>,
    /// Index into the scene box list, NO_ACTOR for background.
    pub slot: Vec<u16>,
}

/// Cast the scene against one camera. `world_to_sensor` is the extrinsic.
pub fn raster_scene(
    boxes: &[SceneBox],
    world_to_sensor: &Transform,
    k: &CameraIntrinsics,
) -> Raster {
    let (w, h) = (k.width, k.height);
    let npx = (w as usize) * (h as usize);
    let mut depth = vec![f64::INFINITY; npx];
    let mut slot = vec![NO_ACTOR; npx];

    let sensor_boxes: Vec<SensorBox> = boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| {
            let center_s = world_to_sensor.apply(b.center_w);
            let rot_s = world_to_sensor.rot.mul_mat(&b.rot_w);
            let rot_ts = rot_s.transpose();
            // Conservative screen rect from the 8 corners.
            let mut any_front = false;
            let mut any_behind = false;
            let (mut u0, mut u1) = (f64::INFINITY, f64::NEG_INFINITY);
            let (mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY);
            for ci in 0..8u32 {
                let corner = Vec3::new(
                    if ci & 1 != 0 { b.extent.x } else { -b.extent.x },
                    if ci & 2 != 0 { b.extent.y } else { -b.extent.y },
                    if ci & 4 != 0 { b.extent.z } else { -b.extent.z },
                );
                let p = rot_s.mul_vec(corner).add(center_s);
                match project_to_image(k, p) {
                    Some(ip) => {
                        any_front = true;
                        u0 = u0.min(ip.u);
                        u1 = u1.max(ip.u);
                        v0 = v0.min(ip.v);
                        v1 = v1.max(ip.v);
                    }
                    None => any_behind = true,
                }
            }
            if !any_front {
                return None;
            }
            let rect = if any_behind {
                // Straddles the camera plane: footprint unbounded, scan all.
                (0, w, 0, h)
            } else {
                let x0 = (u0.floor() - 1.0).max(0.0) as u32;
                let x1 = ((u1.ceil() + 1.0).min(w as f64) as u32).min(w);
                let y0 = (v0.floor() - 1.0).max(0.0) as u32;
                let y1 = ((v1.ceil() + 1.0).min(h as f64) as u32).min(h);
                if x0 >= x1 || y0 >= y1 {
                    return None;
                }
                (x0, x1, y0, y1)
            };
            Some(SensorBox { slot: i as u16, center_s, rot_ts, extent: b.extent, rect })
        })
        .collect();

    for sb in &sensor_boxes {
        let origin_l = sb.rot_ts.mul_vec(sb.center_s.scale(-1.0));
        let (x0, x1, y0, y1) = sb.rect;
        for py in y0..y1 {
            let dz = (k.cy - (py as f64 + 0.5)) / k.fy;
            let row = (py * k.width) as usize;
            for px in x0..x1 {
                let dy = ((px as f64 + 0.5) - k.cx) / k.fx;
                let dir_l = sb.rot_ts.mul_vec(Vec3::new(1.0, dy, dz));
                if let Some((t_near, t_far)) = slab_intersect(origin_l, dir_l, sb.extent) {
                    let t = if t_near >= 1e-6 {
                        t_near
                    } else if t_far >= 1e-6 {
                        t_far
                    } else {
                        continue;
                    };
                    let i = row + px as usize;
                    if t < depth[i] {
                        depth[i] = t;
                        slot[i] = sb.slot;
                    }
                }
            }
        }
    }

    Raster { width: w, height: h, depth, slot }
}

/// The world->sensor transform for a sensor mounted on the ego.
pub fn sensor_extrinsic(w: &WorldState, spec: &SensorSpec) -> Transform {
    sensor_world_transform(w, spec).inverse()
}

/// The sensor->world transform (sensor pose) for a sensor mounted on the ego.
pub fn sensor_world_transform(w: &WorldState, spec: &SensorSpec) -> Transform {
    w.ego()
        .pose
        .transform()
        .compose(&spec.mount_pose.pose().transform())
}

pub fn camera_intrinsics(spec: &SensorSpec) -> CameraIntrinsics {
    intrinsics_from_fov(spec.width, spec.height, spec.fov_deg)
        .expect("validated camera fov")
}

/// Clamp a raw raster into the depth image value range.
pub fn depth_from_raster(raster: &Raster) -> DepthImage {
    let meters = raster
        .depth
        .iter()
        .map(|&t| if t.is_finite() { t.min(BACKGROUND_DEPTH_M) } else { BACKGROUND_DEPTH_M })
        .collect();
    DepthImage { width: raster.width, height: raster.height, meters }
}

/// Depth of the nearest actor box per pixel, 1000 m background, ego excluded.
pub fn render_depth(w: &WorldState, cam: &SensorSpec) -> DepthImage {
    let boxes = scene_boxes(w, w.ego_id);
    let raster = raster_scene(&boxes, &sensor_extrinsic(w, cam), &camera_intrinsics(cam));
    depth_from_raster(&raster)
}

/// Instance raster: channel0 = class tag, channels 1-2 = actor id lo/hi,
/// channel3 = 255 everywhere.
pub fn render_instance(w: &WorldState, cam: &SensorSpec) -> Vec<u8> {
    let boxes = scene_boxes(w, w.ego_id);
    let raster = raster_scene(&boxes, &sensor_extrinsic(w, cam), &camera_intrinsics(cam));
    let mut out = vec![0u8; raster.depth.len() * 4];
    for (i, &s) in raster.slot.iter().enumerate() {
        let px = &mut out[i * 4..i * 4 + 4];
        if s != NO_ACTOR {
            let b = &boxes[s as usize];
            px[0] = b.class.tag();
            px[1] = (b.actor_id & 0xFF) as u8;
            px[2] = (b.actor_id >> 8) as u8;
        }
        px[3] = 255;
    }
    out
}

fn palette_color(palette_seed: u64, actor_id: u16) -> [u8; 3] {
    let h = splitmix64(palette_seed ^ (actor_id as u64).wrapping_mul(0x9e3779b97f4a7c15));
    [(h & 0xFF) as u8, ((h >> 8) & 0xFF) as u8, ((h >> 16) & 0xFF) as u8]
}

const RGB_BACKGROUND: [u8; 3] = [34, 34, 34];

/// The RGB camera output: the instance raster colored by a seeded per-actor
/// palette. Payload size matches a real RGBA camera frame.
pub fn render_rgb(w: &WorldState, cam: &SensorSpec, palette_seed: u64) -> Vec<u8> {
    let boxes = scene_boxes(w, w.ego_id);
    let raster = raster_scene(&boxes, &sensor_extrinsic(w, cam), &camera_intrinsics(cam));
    let mut out = vec![0u8; raster.depth.len() * 4];
    for (i, &s) in raster.slot.iter().enumerate() {
        let px = &mut out[i * 4..i * 4 + 4];
        let rgb = if s != NO_ACTOR {
            palette_color(palette_seed, boxes[s as usize].actor_id)
        } else {
            RGB_BACKGROUND
        };
        px[..3].copy_from_slice(&rgb);
        px[3] = 255;
    }
    out
}

const DEPTH_CODE_MAX: f64 = (1u32 << 24) as f64 - 1.0;

/// Three-channel byte encoding of a depth image:
/// `code = round(d/1000 · (256³−1))`, split little-endian into R, G, B.
/// Out-of-range depths are clamped into [0, 1000] and counted.
pub fn encode_depth_rgb(d: &DepthImage) -> (Vec<u8>, u32) {
    let mut out = vec![0u8; d.meters.len() * 3];
    let mut clamped = 0u32;
    for (i, &m) in d.meters.iter().enumerate() {
        let v = if (0.0..=BACKGROUND_DEPTH_M).contains(&m) {
            m
        } else {
            clamped += 1;
            m.clamp(0.0, BACKGROUND_DEPTH_M)
        };
        let code = (v / BACKGROUND_DEPTH_M * DEPTH_CODE_MAX).round() as u32;
        out[i * 3] = (code & 0xFF) as u8;
        out[i * 3 + 1] = ((code >> 8) & 0xFF) as u8;
        out[i * 3 + 2] = ((code >> 16) & 0xFF) as u8;
    }
    (out, clamped)
}

/// Pad byte appended to each encoded depth pixel in storage/wire form.
pub const DEPTH_PAD_BYTE: u8 = 255;

/// The 4-byte/pixel wire and storage form of a depth image: the RGB code
/// triplet of [`encode_depth_rgb`] plus a constant pad byte per pixel, so
/// image frames are uniformly width·height·4 bytes.
pub fn depth_payload(d: &DepthImage) -> (Vec<u8>, u32) {
    let (rgb, clamped) = encode_depth_rgb(d);
    let mut out = vec![0u8; d.meters.len() * 4];
    for i in 0..d.meters.len() {
        out[i * 4..i * 4 + 3].copy_from_slice(&rgb[i * 3..i * 3 + 3]);
        out[i * 4 + 3] = DEPTH_PAD_BYTE;
    }
    (out, clamped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_run_config, validate_config, SensorKind};
    use crate::geometry::{Pose, RotationRpy};
    use crate::world::{spawn_world, ActorState};

    fn empty_world() -> WorldState {
        let doc = r#"{"duration_s": 1.0, "fps": 30,
            "sensors": [ {"sensor_id": "d0", "kind": "depth", "width": 64, "height": 48} ]}"#;
        let cfg = validate_config(&parse_run_config(doc).unwrap()).unwrap();
        spawn_world(&cfg, 0).unwrap()
    }

    fn cam_spec(width: u32, height: u32) -> SensorSpec {
        SensorSpec {
            sensor_id: "d0".into(),
            kind: SensorKind::Depth,
            mount_pose: Default::default(),
            fov_deg: 90.0,
            width,
            height,
            channels: 0,
            rotation_hz: 0.0,
            points_per_second: 0,
            range_m: 0.0,
            lag_frames: 0,
        }
    }

    fn add_box(w: &mut WorldState, id: u16, center: Vec3, extent: Vec3, yaw: f64) {
        w.actors.push(ActorState {
            actor_id: id,
            class: ActorClass::Vehicle,
            pose: Pose::new(center, RotationRpy::yaw_only(yaw)),
            velocity: Vec3::ZERO,
            yaw_rate: 0.0,
            extent,
        });
    }

    #[test]
    fn empty_world_is_all_background() {
        let w = empty_world();
        let d = render_depth(&w, &cam_spec(64, 48));
        assert!(d.meters.iter().all(|&m| m == BACKGROUND_DEPTH_M));
        let inst = render_instance(&w, &cam_spec(64, 48));
        for px in inst.chunks(4) {
            assert_eq!(px, [0, 0, 0, 255]);
        }
    }

    #[test]
    fn center_pixel_sees_near_face() {
        // Ego box center is at z = 0.75; put the camera at box height so the
        // central ray hits the target face dead on.
        let mut w = empty_world();
        let ego_z = w.ego().pose.location.z;
        add_box(&mut w, 77, Vec3::new(10.0, 0.0, ego_z), Vec3::new(1.0, 1.0, 1.0), 0.0);
        let d = render_depth(&w, &cam_spec(64, 48));
        let center = d.at(32, 24);
        assert!((center - 9.0).abs() < 1e-6, "center depth {center}");
    }

    #[test]
    fn box_behind_camera_is_invisible() {
        let mut w = empty_world();
        add_box(&mut w, 77, Vec3::new(-10.0, 0.0, 1.0), Vec3::new(1.0, 1.0, 1.0), 0.0);
        let d = render_depth(&w, &cam_spec(64, 48));
        assert!(d.meters.iter().all(|&m| m == BACKGROUND_DEPTH_M));
    }

    #[test]
    fn instance_encodes_actor_id_bytes() {
        let mut w = empty_world();
        add_box(&mut w, 258, Vec3::new(10.0, 0.0, 0.75), Vec3::new(1.0, 1.0, 1.0), 0.0);
        let inst = render_instance(&w, &cam_spec(64, 48));
        let i = (24 * 64 + 32) * 4;
        assert_eq!(&inst[i..i + 4], &[1, 2, 1, 255]);
    }

    #[test]
    fn depth_and_instance_agree_on_nearest_actor() {
        let mut w = empty_world();
        let ego_z = w.ego().pose.location.z;
        add_box(&mut w, 10, Vec3::new(12.0, 1.0, ego_z), Vec3::new(2.0, 1.0, 1.0), 20.0);
        add_box(&mut w, 11, Vec3::new(8.0, -0.5, ego_z), Vec3::new(1.0, 1.5, 0.8), -35.0);
        add_box(&mut w, 12, Vec3::new(15.0, 0.0, ego_z), Vec3::new(2.0, 2.0, 1.5), 0.0);
        let spec = cam_spec(96, 64);
        let d = render_depth(&w, &spec);
        let inst = render_instance(&w, &spec);
        // Wherever depth sees an actor, instance must name one and vice versa.
        for (i, &m) in d.meters.iter().enumerate() {
            let id = inst[i * 4 + 1] as u16 | ((inst[i * 4 + 2] as u16) << 8);
            if m < BACKGROUND_DEPTH_M {
                assert_ne!(id, 0, "pixel {i}: depth {m} with no instance id");
            } else {
                assert_eq!(id, 0, "pixel {i}: background depth but instance id {id}");
            }
        }
    }

    #[test]
    fn rgb_uses_stable_palette() {
        let mut w = empty_world();
        add_box(&mut w, 42, Vec3::new(10.0, 0.0, 0.75), Vec3::new(1.0, 1.0, 1.0), 0.0);
        let a = render_rgb(&w, &cam_spec(64, 48), 7);
        let b = render_rgb(&w, &cam_spec(64, 48), 7);
        assert_eq!(a, b);
        let c = render_rgb(&w, &cam_spec(64, 48), 8);
        assert_ne!(a, c);
    }

    #[test]
    fn depth_codec_endpoints() {
        let d = DepthImage { width: 2, height: 1, meters: vec![0.0, 1000.0] };
        let (bytes, clamped) = encode_depth_rgb(&d);
        assert_eq!(clamped, 0);
        assert_eq!(bytes, vec![0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn depth_codec_counts_clamped() {
        let d = DepthImage { width: 2, height: 1, meters: vec![-1.0, 1500.0] };
        let (bytes, clamped) = encode_depth_rgb(&d);
        assert_eq!(clamped, 2);
        assert_eq!(bytes, vec![0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn depth_payload_pads_to_four_channels() {
        let d = DepthImage { width: 1, height: 1, meters: vec![1000.0] };
        let (bytes, _) = depth_payload(&d);
        assert_eq!(bytes, vec![255, 255, 255, DEPTH_PAD_BYTE]);
    }
}
