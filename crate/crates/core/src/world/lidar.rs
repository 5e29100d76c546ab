//! Spinning LiDAR model: one full revolution per frame, rays distributed over
//! `channels` elevation rows and `points_per_second / (channels · fps)`
//! azimuth columns. Each ray reports the nearest box hit within range, tagged
//! with the actor id, or a ground-plane hit tagged 0. The ego's own box is
//! excluded, like the cameras.

use crate::config::SensorSpec;
use crate::geometry::Vec3;
use crate::world::render::{scene_boxes, sensor_world_transform, slab_intersect, SceneBox};
use crate::world::WorldState;

/// Vertical scan fan, degrees. Single-channel sensors aim at the midline.
pub const ELEVATION_MAX_DEG: f64 = 10.0;
pub const ELEVATION_MIN_DEG: f64 = -30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    /// Sensor-frame coordinates, meters.
    pub x: f32,
    pub y: f32,
    pub z: f32,
    /// Actor id of the hit box, 0 for a ground hit.
    pub actor_id: u16,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LidarScan {
    pub points: Vec<LidarPoint>,
}

impl LidarScan {
    const POINT_WIRE: usize = 16;

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.points.len() * Self::POINT_WIRE);
        out.extend_from_slice(&(self.points.len() as u32).to_le_bytes());
        for p in &self.points {
            out.extend_from_slice(&p.x.to_le_bytes());
            out.extend_from_slice(&p.y.to_le_bytes());
            out.extend_from_slice(&p.z.to_le_bytes());
            out.extend_from_slice(&(p.actor_id as u32).to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(b: &[u8]) -> Option<Self> {
        if b.len() < 4 {
            return None;
        }
        let n = u32::from_le_bytes(b[0..4].try_into().unwrap()) as usize;
        if b.len() != 4 + n * Self::POINT_WIRE {
            return None;
        }
        let mut points = Vec::with_capacity(n);
        for i in 0..n {
            let o = 4 + i * Self::POINT_WIRE;
            let f = |k: usize| f32::from_le_bytes(b[o + k * 4..o + k * 4 + 4].try_into().unwrap());
            let id = u32::from_le_bytes(b[o + 12..o + 16].try_into().unwrap());
            points.push(LidarPoint { x: f(0), y: f(1), z: f(2), actor_id: id as u16 });
        }
        Some(LidarScan { points })
    }
}

fn elevation_deg(channel: u32, channels: u32) -> f64 {
    if channels <= 1 {
        (ELEVATION_MAX_DEG + ELEVATION_MIN_DEG) / 2.0
    } else {
        ELEVATION_MAX_DEG
            + channel as f64 * (ELEVATION_MIN_DEG - ELEVATION_MAX_DEG) / (channels - 1) as f64
    }
}

/// Cast one frame's revolution. Scan order: azimuth column outer, channel
/// inner, both ascending, so output order is deterministic.
pub fn simulate_lidar(w: &WorldState, spec: &SensorSpec, fps: u32) -> LidarScan {
    let boxes = scene_boxes(w, w.ego_id);
    let sensor_to_world = sensor_world_transform(w, spec);
    let origin_w = sensor_to_world.trans;
    let columns = spec.lidar_columns(fps);

    // Per-box precompute: ray origin in each box's local frame.
    struct LocalBox<'a> {
        b: &'a SceneBox,
        origin_l: Vec3,
    }
    let locals: Vec<LocalBox> = boxes
        .iter()
        .map(|b| LocalBox {
            origin_l: b.rot_w.transpose().mul_vec(origin_w.sub(b.center_w)),
            b,
        })
        .collect();

    let mut points = Vec::new();
    for col in 0..columns {
        let azimuth = (-180.0 + col as f64 * 360.0 / columns as f64).to_radians();
        let (sa, ca) = azimuth.sin_cos();
        for ch in 0..spec.channels {
            let elev = elevation_deg(ch, spec.channels).to_radians();
            let (se, ce) = elev.sin_cos();
            let dir_s = Vec3::new(ce * ca, ce * sa, se);
            let dir_w = sensor_to_world.rot.mul_vec(dir_s);

            let mut best_t = spec.range_m;
            let mut best_id: Option<u16> = None;
            for lb in &locals {
                let dir_l = lb.b.rot_w.transpose().mul_vec(dir_w);
                if let Some((t_near, t_far)) = slab_intersect(lb.origin_l, dir_l, lb.b.extent) {
                    let t = if t_near >= 1e-6 {
                        t_near
                    } else if t_far >= 1e-6 {
                        t_far
                    } else {
                        continue;
                    };
                    if t < best_t {
                        best_t = t;
                        best_id = Some(lb.b.actor_id);
                    }
                }
            }
            // Ground plane z = 0, tagged actor 0.
            if dir_w.z < -1e-9 {
                let t = -origin_w.z / dir_w.z;
                if t >= 1e-6 && t < best_t {
                    best_t = t;
                    best_id = Some(0);
                }
            }
            if let Some(id) = best_id {
                let p = dir_s.scale(best_t);
                points.push(LidarPoint { x: p.x as f32, y: p.y as f32, z: p.z as f32, actor_id: id });
            }
        }
    }
    LidarScan { points }
}
