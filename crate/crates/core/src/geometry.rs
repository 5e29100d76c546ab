//! Left-handed z-up coordinate frame shared by the world simulator and the
//! annotator: x forward, y right, z up. Positive yaw turns the forward axis
//! toward +y (a rightward turn), positive pitch raises the nose, positive
//! roll drops the right side. Rotations compose as `Rz(yaw)·Ry(pitch)·Rx(roll)`;
//! server and annotator both go through this module so the two conventions
//! cancel identically.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Position or direction in meters. x forward, y right, z up.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        self.sub(o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Rotation in degrees: roll about X, pitch about Y, yaw about Z.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RotationRpy {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl RotationRpy {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        RotationRpy { roll, pitch, yaw }
    }

    pub fn yaw_only(yaw: f64) -> Self {
        RotationRpy { roll: 0.0, pitch: 0.0, yaw }
    }

    /// Canonical form with every angle in (-180, 180].
    pub fn normalized(self) -> Self {
        RotationRpy {
            roll: normalize_deg(self.roll),
            pitch: normalize_deg(self.pitch),
            yaw: normalize_deg(self.yaw),
        }
    }
}

/// Map an angle in degrees to the canonical range (-180, 180].
pub fn normalize_deg(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Wrap an angle in radians to (-pi, pi].
pub fn wrap_rad(rad: f64) -> f64 {
    let r = rad.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let a = &self.0;
        let b = &o.0;
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Mat3(out)
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Rotation matrix for the frame conventions above: `Rz(yaw)·Ry(pitch)·Rx(roll)`,
/// angles in degrees. Orthonormal with determinant +1.
pub fn rotation_matrix(r: RotationRpy) -> Mat3 {
    let (sr, cr) = r.roll.to_radians().sin_cos();
    let (sp, cp) = r.pitch.to_radians().sin_cos();
    let (sy, cy) = r.yaw.to_radians().sin_cos();

    // Rz(yaw): +x toward +y. Ry(pitch): +x toward +z (nose up).
    // Rx(roll): +y toward -z (right side down).
    let rz = Mat3([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]]);
    let ry = Mat3([[cp, 0.0, -sp], [0.0, 1.0, 0.0], [sp, 0.0, cp]]);
    let rx = Mat3([[1.0, 0.0, 0.0], [0.0, cr, sr], [0.0, -sr, cr]]);
    rz.mul_mat(&ry).mul_mat(&rx)
}

/// Recover roll/pitch/yaw (degrees) from an orthonormal matrix produced by
/// [`rotation_matrix`]. At pitch = ±90° roll is folded into yaw.
pub fn matrix_to_rpy(m: &Mat3) -> RotationRpy {
    let r = &m.0;
    let sp = r[2][0].clamp(-1.0, 1.0);
    if sp.abs() > 1.0 - 1e-12 {
        // Gimbal lock: r[0][1] = -sin(yaw - sign(sp)*roll)·..., pick roll = 0.
        let yaw = (-r[0][1]).atan2(-r[0][2] * sp.signum());
        RotationRpy {
            roll: 0.0,
            pitch: sp.asin().to_degrees(),
            yaw: yaw.to_degrees(),
        }
    } else {
        RotationRpy {
            roll: (-r[2][1]).atan2(r[2][2]).to_degrees(),
            pitch: sp.asin().to_degrees(),
            yaw: r[1][0].atan2(r[0][0]).to_degrees(),
        }
    }
}

/// Rigid pose: rotation applied first, then translation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub location: Vec3,
    pub rotation: RotationRpy,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        location: Vec3::ZERO,
        rotation: RotationRpy { roll: 0.0, pitch: 0.0, yaw: 0.0 },
    };

    pub fn new(location: Vec3, rotation: RotationRpy) -> Self {
        Pose { location, rotation }
    }

    pub fn transform(&self) -> Transform {
        Transform {
            rot: rotation_matrix(self.rotation),
            trans: self.location,
        }
    }
}

/// Precomputed rigid transform (rotation matrix + translation). Poses are the
/// boundary representation; composition and inversion happen here so repeated
/// RPY extraction does not accumulate error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rot: Mat3,
    pub trans: Vec3,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { rot: Mat3::IDENTITY, trans: Vec3::ZERO };

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rot.mul_vec(p).add(self.trans)
    }

    /// `self` then-outer composition: (a.compose(b)).apply(p) == a.apply(b.apply(p)).
    pub fn compose(&self, inner: &Transform) -> Transform {
        Transform {
            rot: self.rot.mul_mat(&inner.rot),
            trans: self.rot.mul_vec(inner.trans).add(self.trans),
        }
    }

    pub fn inverse(&self) -> Transform {
        let rt = self.rot.transpose();
        Transform {
            trans: rt.mul_vec(self.trans).scale(-1.0),
            rot: rt,
        }
    }

    pub fn rotation_rpy(&self) -> RotationRpy {
        matrix_to_rpy(&self.rot)
    }
}

/// Local point to parent frame: `R·p + location`.
pub fn apply_pose(pose: &Pose, point: Vec3) -> Vec3 {
    pose.transform().apply(point)
}

/// Parent frame to local: the inverse rigid transform of the pose.
pub fn invert_pose(pose: &Pose) -> Transform {
    pose.transform().inverse()
}

/// Box as center + half-extents + rotation. `extent` holds half-dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Vec3,
    pub extent: Vec3,
    pub rotation: RotationRpy,
}

impl OrientedBox {
    pub fn new(center: Vec3, extent: Vec3, rotation: RotationRpy) -> Self {
        OrientedBox { center, extent, rotation }
    }
}

/// The 8 corners `center + R·(±ex, ±ey, ±ez)`. Ordering: corner index bits
/// select the sign per axis (bit0 → x, bit1 → y, bit2 → z; 0 = -extent).
pub fn box_vertices(b: &OrientedBox) -> [Vec3; 8] {
    let r = rotation_matrix(b.rotation);
    let mut out = [Vec3::ZERO; 8];
    for (i, v) in out.iter_mut().enumerate() {
        let local = Vec3::new(
            if i & 1 != 0 { b.extent.x } else { -b.extent.x },
            if i & 2 != 0 { b.extent.y } else { -b.extent.y },
            if i & 4 != 0 { b.extent.z } else { -b.extent.z },
        );
        *v = r.mul_vec(local).add(b.center);
    }
    out
}

/// Pinhole camera model. Sensor frame is x-forward, y-right, z-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("horizontal fov must be in (0, 180) degrees, got {0}")]
    FovOutOfRange(f64),
}

/// Square-pixel intrinsics from a horizontal field of view:
/// `fx = fy = width / (2·tan(fov/2))`, principal point at the image center.
pub fn intrinsics_from_fov(
    width: u32,
    height: u32,
    fov_deg: f64,
) -> Result<CameraIntrinsics, GeometryError> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(GeometryError::FovOutOfRange(fov_deg));
    }
    let f = width as f64 / (2.0 * (fov_deg.to_radians() / 2.0).tan());
    Ok(CameraIntrinsics {
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
    })
}

/// Projection of a sensor-frame point. `depth` is the forward (x) coordinate,
/// not the ray length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Threshold below which a point counts as behind the camera plane.
pub const BEHIND_CAMERA_EPS: f64 = 1e-6;

/// Pinhole projection: `u = cx + fx·(y/x)`, `v = cy - fy·(z/x)`, depth = x.
/// Returns `None` for points at or behind the camera plane.
pub fn project_to_image(k: &CameraIntrinsics, p_sensor: Vec3) -> Option<ImagePoint> {
    if p_sensor.x <= BEHIND_CAMERA_EPS {
        return None;
    }
    Some(ImagePoint {
        u: k.cx + k.fx * (p_sensor.y / p_sensor.x),
        v: k.cy - k.fy * (p_sensor.z / p_sensor.x),
        depth: p_sensor.x,
    })
}

/// Axis-aligned 2D box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox2d {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl Bbox2d {
    /// Zero width or height after clipping.
    pub fn is_degenerate(&self) -> bool {
        self.right - self.left <= 0.0 || self.bottom - self.top <= 0.0
    }
}

/// Min/max box over projected points, clipped to `[0,width]×[0,height]`.
/// `None` when there are no points or the clipped result is outside the image.
/// Degenerate (zero-area) boxes that still touch the image are returned.
pub fn bbox2d_from_points(points: &[(f64, f64)], width: u32, height: u32) -> Option<Bbox2d> {
    let mut min_u = f64::INFINITY;
    let mut max_u = f64::NEG_INFINITY;
    let mut min_v = f64::INFINITY;
    let mut max_v = f64::NEG_INFINITY;
    for &(u, v) in points {
        min_u = min_u.min(u);
        max_u = max_u.max(u);
        min_v = min_v.min(v);
        max_v = max_v.max(v);
    }
    if points.is_empty() {
        return None;
    }
    let left = min_u.max(0.0);
    let right = max_u.min(width as f64);
    let top = min_v.max(0.0);
    let bottom = max_v.min(height as f64);
    if right < left || bottom < top {
        return None;
    }
    Some(Bbox2d { left, top, right, bottom })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_vec_close(a: Vec3, b: Vec3, tol: f64) {
        assert!(
            (a.x - b.x).abs() <= tol && (a.y - b.y).abs() <= tol && (a.z - b.z).abs() <= tol,
            "{a:?} != {b:?} (tol {tol})"
        );
    }

    #[test]
    fn zero_rotation_is_identity() {
        let m = rotation_matrix(RotationRpy::default());
        assert_eq!(m, Mat3::IDENTITY);
    }

    #[test]
    fn positive_yaw_turns_forward_to_right() {
        let m = rotation_matrix(RotationRpy::yaw_only(90.0));
        assert_vec_close(m.mul_vec(Vec3::new(1.0, 0.0, 0.0)), Vec3::new(0.0, 1.0, 0.0), 1e-12);
    }

    #[test]
    fn full_roll_turn_is_identity() {
        let m = rotation_matrix(RotationRpy::new(360.0, 0.0, 0.0));
        assert_vec_close(m.mul_vec(Vec3::new(0.3, -0.4, 0.8)), Vec3::new(0.3, -0.4, 0.8), 1e-12);
    }

    #[test]
    fn positive_pitch_raises_nose() {
        let m = rotation_matrix(RotationRpy::new(0.0, 90.0, 0.0));
        assert_vec_close(m.mul_vec(Vec3::new(1.0, 0.0, 0.0)), Vec3::new(0.0, 0.0, 1.0), 1e-12);
    }

    #[test]
    fn rotation_matrices_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let r = RotationRpy::new(
                rng.gen_range(-720.0..720.0),
                rng.gen_range(-720.0..720.0),
                rng.gen_range(-720.0..720.0),
            );
            let m = rotation_matrix(r);
            let mt_m = m.transpose().mul_mat(&m);
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (mt_m.0[i][j] - expect).abs() < 1e-9,
                        "RtR[{i}][{j}] = {} for {r:?}",
                        mt_m.0[i][j]
                    );
                }
            }
            assert!((m.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn matrix_rpy_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let r = RotationRpy::new(
                rng.gen_range(-179.0..179.0),
                rng.gen_range(-89.0..89.0),
                rng.gen_range(-179.0..179.0),
            );
            let back = matrix_to_rpy(&rotation_matrix(r));
            let m1 = rotation_matrix(r);
            let m2 = rotation_matrix(back);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((m1.0[i][j] - m2.0[i][j]).abs() < 1e-9, "{r:?} vs {back:?}");
                }
            }
        }
    }

    #[test]
    fn apply_pose_examples() {
        assert_vec_close(
            apply_pose(&Pose::IDENTITY, Vec3::new(1.0, 2.0, 3.0)),
            Vec3::new(1.0, 2.0, 3.0),
            0.0,
        );
        let p = Pose::new(Vec3::new(10.0, 0.0, 0.0), RotationRpy::default());
        assert_vec_close(apply_pose(&p, Vec3::new(1.0, 0.0, 0.0)), Vec3::new(11.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn invert_pose_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let p = Pose::new(
                Vec3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-5.0..5.0)),
                RotationRpy::new(
                    rng.gen_range(-180.0..180.0),
                    rng.gen_range(-180.0..180.0),
                    rng.gen_range(-180.0..180.0),
                ),
            );
            let v = Vec3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
            let round = invert_pose(&p).apply(apply_pose(&p, v));
            assert_vec_close(round, v, 1e-9);
        }
    }

    #[test]
    fn invert_pose_simple_cases() {
        let id = invert_pose(&Pose::IDENTITY);
        assert_vec_close(id.apply(Vec3::new(1.0, 2.0, 3.0)), Vec3::new(1.0, 2.0, 3.0), 0.0);

        let t = invert_pose(&Pose::new(Vec3::new(5.0, -2.0, 1.0), RotationRpy::default()));
        assert_vec_close(t.apply(Vec3::new(5.0, -2.0, 1.0)), Vec3::ZERO, 0.0);

        let y = invert_pose(&Pose::new(Vec3::ZERO, RotationRpy::yaw_only(90.0)));
        assert_vec_close(y.apply(Vec3::new(0.0, 1.0, 0.0)), Vec3::new(1.0, 0.0, 0.0), 1e-12);
    }

    #[test]
    fn intrinsics_from_fov_examples() {
        let k = intrinsics_from_fov(1280, 720, 90.0).unwrap();
        assert!((k.fx - 640.0).abs() < 1e-9);
        let k = intrinsics_from_fov(100, 100, 90.0).unwrap();
        assert!((k.fx - 50.0).abs() < 1e-9);
        assert!((k.cx - 50.0).abs() < 1e-9);
        assert!((k.cy - 50.0).abs() < 1e-9);
        assert!(intrinsics_from_fov(100, 100, 0.0).is_err());
        assert!(intrinsics_from_fov(100, 100, 180.0).is_err());
    }

    #[test]
    fn project_examples() {
        let k = intrinsics_from_fov(1280, 720, 90.0).unwrap();
        let p = project_to_image(&k, Vec3::new(10.0, 0.0, 0.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (k.cx, k.cy, 10.0));

        let p = project_to_image(&k, Vec3::new(10.0, 10.0, 0.0)).unwrap();
        assert!((p.u - 1280.0).abs() < 1e-9);

        assert!(project_to_image(&k, Vec3::new(-1.0, 0.0, 0.0)).is_none());
        assert!(project_to_image(&k, Vec3::new(0.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn projection_scale_consistency() {
        let k = intrinsics_from_fov(640, 360, 100.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10_000 {
            let p = Vec3::new(rng.gen_range(0.1..50.0), rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
            let lambda = rng.gen_range(0.01..100.0);
            let a = project_to_image(&k, p).unwrap();
            let b = project_to_image(&k, p.scale(lambda)).unwrap();
            assert!((a.u - b.u).abs() < 1e-6 && (a.v - b.v).abs() < 1e-6);
            assert!((b.depth - lambda * p.x).abs() < 1e-6 * lambda.max(1.0));
        }
    }

    #[test]
    fn box_vertices_examples() {
        let b = OrientedBox::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0), RotationRpy::default());
        let vs = box_vertices(&b);
        for v in &vs {
            assert_eq!(v.x.abs(), 1.0);
            assert_eq!(v.y.abs(), 1.0);
            assert_eq!(v.z.abs(), 1.0);
        }

        let b = OrientedBox::new(Vec3::new(5.0, 0.0, 0.0), Vec3::new(1.0, 2.0, 3.0), RotationRpy::default());
        for v in box_vertices(&b) {
            assert!(v.x == 4.0 || v.x == 6.0);
            assert!(v.y == -2.0 || v.y == 2.0);
            assert!(v.z == -3.0 || v.z == 3.0);
        }

        // Yaw 90 swaps the roles of the x and y extents.
        let b = OrientedBox::new(Vec3::ZERO, Vec3::new(2.0, 1.0, 1.0), RotationRpy::yaw_only(90.0));
        for v in box_vertices(&b) {
            assert!((v.x.abs() - 1.0).abs() < 1e-12);
            assert!((v.y.abs() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn box_vertices_mean_is_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let b = OrientedBox::new(
                Vec3::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), rng.gen_range(-3.0..3.0)),
                Vec3::new(rng.gen_range(0.1..4.0), rng.gen_range(0.1..4.0), rng.gen_range(0.1..4.0)),
                RotationRpy::new(rng.gen_range(-180.0..180.0), rng.gen_range(-180.0..180.0), rng.gen_range(-180.0..180.0)),
            );
            let mut mean = Vec3::ZERO;
            for v in box_vertices(&b) {
                mean = mean.add(v);
            }
            assert_vec_close(mean.scale(1.0 / 8.0), b.center, 1e-9);
        }
    }

    #[test]
    fn bbox2d_examples() {
        let b = bbox2d_from_points(&[(10.0, 10.0), (20.0, 30.0)], 100, 100).unwrap();
        assert_eq!(b, Bbox2d { left: 10.0, top: 10.0, right: 20.0, bottom: 30.0 });
        assert!(!b.is_degenerate());

        let b = bbox2d_from_points(&[(-5.0, 50.0), (50.0, 50.0)], 100, 100).unwrap();
        assert_eq!(b, Bbox2d { left: 0.0, top: 50.0, right: 50.0, bottom: 50.0 });
        assert!(b.is_degenerate());

        assert!(bbox2d_from_points(&[(-20.0, 50.0), (-5.0, 60.0)], 100, 100).is_none());
        assert!(bbox2d_from_points(&[], 100, 100).is_none());
    }

    #[test]
    fn angle_normalization() {
        assert_eq!(normalize_deg(190.0), -170.0);
        assert_eq!(normalize_deg(180.0), 180.0);
        assert_eq!(normalize_deg(-180.0), 180.0);
        assert_eq!(normalize_deg(540.0), 180.0);
        assert!((wrap_rad(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_rad(-PI) - PI).abs() < 1e-12);
    }
}
