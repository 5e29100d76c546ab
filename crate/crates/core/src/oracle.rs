//! Independent reference implementations and generators for the test suites.
//!
//! Nothing here is used by the production data path. The visibility oracle
//! deliberately re-derives ray/box clipping from scratch so it shares no code
//! with the renderer or the depth-map test it cross-checks.

use crate::geometry::{
    box_vertices, project_to_image, rotation_matrix, CameraIntrinsics, OrientedBox, Transform, Vec3,
};
use crate::protocol::{ActorRecord, ActorSnapshotMsg, Message, PayloadKind, SensorPayloadMsg};
use crate::world::ActorClass;
use rand::Rng;

/// Fraction of the camera-to-vertex segment an occluder must undercut before
/// the oracle calls the vertex occluded; guards against the vertex's own
/// surface registering as its occluder.
const SEGMENT_MARGIN: f64 = 1e-6;

/// Does the segment from `origin` to `target` (exclusive) pass through the
/// box? Clips the segment parameter t in (0, 1 - margin) against each pair of
/// box faces in the box's local frame.
fn segment_enters_box(origin: Vec3, target: Vec3, b: &OrientedBox) -> bool {
    let to_local = rotation_matrix(b.rotation).transpose();
    let o = to_local.mul_vec(origin.sub(b.center));
    let d = to_local.mul_vec(target.sub(origin));
    let mut t_lo = 0.0f64;
    let mut t_hi = 1.0 - SEGMENT_MARGIN;
    for (oc, dc, e) in [(o.x, d.x, b.extent.x), (o.y, d.y, b.extent.y), (o.z, d.z, b.extent.z)] {
        if dc == 0.0 {
            if oc < -e || oc > e {
                return false;
            }
            continue;
        }
        let mut a = (-e - oc) / dc;
        let mut z = (e - oc) / dc;
        if a > z {
            std::mem::swap(&mut a, &mut z);
        }
        t_lo = t_lo.max(a);
        t_hi = t_hi.min(z);
        if t_lo > t_hi {
            return false;
        }
    }
    // Occluding means the clipped interval has positive length: the segment
    // passes through the interior, not merely touching a face or corner.
    t_lo < t_hi
}

/// Ray-cast visibility of one box vertex: it must project in front of the
/// camera and inside the image, and no box surface may lie strictly between
/// the camera and the vertex. Every box tests as an occluder, including the
/// vertex's own: a box hides its far-side corners from the camera just like
/// the depth map does; the segment margin keeps the vertex's own surface
/// from counting.
pub fn vertex_visible_by_raycast(
    boxes: &[OrientedBox],
    vertex: Vec3,
    world_to_sensor: &Transform,
    intrinsics: &CameraIntrinsics,
) -> bool {
    let p_sensor = world_to_sensor.apply(vertex);
    let Some(ip) = project_to_image(intrinsics, p_sensor) else {
        return false;
    };
    if ip.u < 0.0 || ip.u >= intrinsics.width as f64 || ip.v < 0.0 || ip.v >= intrinsics.height as f64
    {
        return false;
    }
    let camera_origin = world_to_sensor.inverse().apply(Vec3::ZERO);
    !boxes
        .iter()
        .any(|b| segment_enters_box(camera_origin, vertex, b))
}

/// Oracle count of visible vertices for one box in the scene.
pub fn count_visible_by_raycast(
    boxes: &[OrientedBox],
    box_index: usize,
    world_to_sensor: &Transform,
    intrinsics: &CameraIntrinsics,
) -> u8 {
    box_vertices(&boxes[box_index])
        .iter()
        .filter(|v| vertex_visible_by_raycast(boxes, **v, world_to_sensor, intrinsics))
        .count() as u8
}

/// A random annotation scene: up to `max_boxes` boxes in front of a camera at
/// the origin looking down +x.
pub fn random_scene(rng: &mut impl Rng, max_boxes: usize) -> Vec<OrientedBox> {
    let n = rng.gen_range(1..=max_boxes);
    (0..n)
        .map(|_| {
            OrientedBox::new(
                Vec3::new(
                    rng.gen_range(3.0..40.0),
                    rng.gen_range(-12.0..12.0),
                    rng.gen_range(-2.0..4.0),
                ),
                Vec3::new(
                    rng.gen_range(0.3..2.5),
                    rng.gen_range(0.3..2.5),
                    rng.gen_range(0.3..2.5),
                ),
                crate::geometry::RotationRpy::new(
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(-180.0..180.0),
                ),
            )
        })
        .collect()
}

/// Scene boxes in renderer form, ids 1..=n.
pub fn scene_to_render_boxes(boxes: &[OrientedBox]) -> Vec<crate::world::render::SceneBox> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| crate::world::render::SceneBox {
            actor_id: (i + 1) as u16,
            class: ActorClass::Vehicle,
            center_w: b.center,
            rot_w: rotation_matrix(b.rotation),
            extent: b.extent,
        })
        .collect()
}

/// Random protocol message covering every kind, for round-trip testing.
pub fn random_message(rng: &mut impl Rng) -> Message {
    match rng.gen_range(0..7) {
        0 => Message::Hello {
            version: rng.gen(),
            config_digest: rng.gen(),
            episode: rng.gen_range(0..1000),
        },
        1 => Message::TickReq,
        2 => Message::TickResp { frame_id: rng.gen() },
        3 => {
            let len = rng.gen_range(0..2048);
            Message::SensorPayload(SensorPayloadMsg {
                sensor_id: format!("sensor_{}", rng.gen_range(0..100)),
                frame_id: rng.gen(),
                payload_kind: PayloadKind::from_byte(rng.gen_range(1..=6)).unwrap(),
                payload: (0..len).map(|_| rng.gen()).collect(),
            })
        }
        4 => {
            let n = rng.gen_range(0..20);
            Message::ActorSnapshot(ActorSnapshotMsg {
                frame_id: rng.gen(),
                actors: (0..n).map(|_| random_actor_record(rng)).collect(),
            })
        }
        5 => Message::Shutdown,
        _ => {
            let len = rng.gen_range(0..100);
            Message::Error {
                message: (0..len).map(|_| rng.gen_range('a'..='z')).collect(),
            }
        }
    }
}

pub fn random_actor_record(rng: &mut impl Rng) -> ActorRecord {
    ActorRecord {
        actor_id: rng.gen_range(1..u16::MAX),
        class: ActorClass::from_tag(rng.gen_range(0..=2)).unwrap(),
        pose: crate::geometry::Pose::new(
            Vec3::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(0.0..5.0)),
            crate::geometry::RotationRpy::new(
                rng.gen_range(-180.0..180.0),
                rng.gen_range(-180.0..180.0),
                rng.gen_range(-180.0..180.0),
            ),
        ),
        velocity: Vec3::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), 0.0),
        extent: Vec3::new(rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0)),
    }
}
