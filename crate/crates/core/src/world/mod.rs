//! Deterministic synthetic world: seeded box actors advanced by kinematic
//! sub-steps. Actors are rigid oriented boxes; motion is `position += R(yaw)·v·dt`
//! per sub-step with yaw integrating `yaw_rate`. Positions wrap toroidally at
//! the world bounds so long episodes keep actors in play.

pub mod lidar;
pub mod render;

use crate::config::{EgoType, TimingPlan, ValidatedConfig};
use crate::geometry::{normalize_deg, rotation_matrix, OrientedBox, Pose, RotationRpy, Vec3};
use crate::hash::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use lidar::{simulate_lidar, LidarPoint, LidarScan};
pub use render::{encode_depth_rgb, render_depth, render_instance, render_rgb, DepthImage};

/// Depth assigned to pixels that hit nothing; also the codec maximum.
pub const BACKGROUND_DEPTH_M: f64 = 1000.0;

/// Gravity as measured by the accelerometer model, world frame.
pub const GRAVITY: Vec3 = Vec3 { x: 0.0, y: 0.0, z: -9.81 };

/// Linear chart from world meters to GNSS degrees (equator approximation).
pub const METERS_PER_DEGREE: f64 = 111_320.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorClass {
    Ego,
    Vehicle,
    Pedestrian,
}

impl ActorClass {
    /// Byte tag used on the wire and in instance rasters.
    pub fn tag(self) -> u8 {
        match self {
            ActorClass::Ego => 0,
            ActorClass::Vehicle => 1,
            ActorClass::Pedestrian => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ActorClass::Ego),
            1 => Some(ActorClass::Vehicle),
            2 => Some(ActorClass::Pedestrian),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ActorClass::Ego => "ego",
            ActorClass::Vehicle => "vehicle",
            ActorClass::Pedestrian => "pedestrian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorState {
    pub actor_id: u16,
    pub class: ActorClass,
    /// World pose; `location` is the box center.
    pub pose: Pose,
    /// Body-frame velocity, m/s (x forward).
    pub velocity: Vec3,
    /// Degrees per second about world z.
    pub yaw_rate: f64,
    /// Box half-dimensions in the actor's local frame.
    pub extent: Vec3,
}

impl ActorState {
    pub fn world_box(&self) -> OrientedBox {
        OrientedBox::new(self.pose.location, self.extent, self.pose.rotation)
    }

    /// Instantaneous world-frame velocity.
    pub fn world_velocity(&self) -> Vec3 {
        rotation_matrix(RotationRpy::yaw_only(self.pose.rotation.yaw)).mul_vec(self.velocity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorldState {
    /// Monotone, starts at 0 on spawn; the first tick produces frame 1.
    pub frame_id: u64,
    pub sim_time_s: f64,
    pub actors: Vec<ActorState>,
    pub ego_id: u16,
    pub weather: String,
    /// World half-size in meters; positions wrap at ±bounds.
    pub bounds: f64,
}

impl WorldState {
    pub fn ego(&self) -> &ActorState {
        self.actors
            .iter()
            .find(|a| a.actor_id == self.ego_id)
            .expect("ego actor present")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SpawnError {
    #[error("spawn saturated after {attempts} placement attempts for actor {actor}; world bounds too small")]
    Saturated { actor: usize, attempts: u32 },
    #[error("actor count {0} exceeds the u16 id space")]
    TooManyActors(u64),
}

fn vehicle_extent(kind: EgoType) -> Vec3 {
    match kind {
        EgoType::Sedan => Vec3::new(2.25, 1.0, 0.75),
        EgoType::Suv => Vec3::new(2.4, 1.05, 0.9),
        EgoType::Truck => Vec3::new(3.6, 1.3, 1.5),
        EgoType::Van => Vec3::new(2.6, 1.05, 1.1),
        EgoType::Hatchback => Vec3::new(2.0, 0.95, 0.8),
    }
}

const VEHICLE_PRESETS: [EgoType; 5] = [
    EgoType::Sedan,
    EgoType::Suv,
    EgoType::Truck,
    EgoType::Van,
    EgoType::Hatchback,
];

const PEDESTRIAN_EXTENT: Vec3 = Vec3 { x: 0.35, y: 0.35, z: 0.9 };

/// Spawn-time speed caps, m/s.
const MAX_VEHICLE_SPEED: f64 = 30.0;
const MAX_PEDESTRIAN_SPEED: f64 = 3.0;

const MAX_SPAWN_ATTEMPTS: u32 = 10_000;

/// Seeded world construction: ego plus `num_vehicles + num_pedestrians`
/// actors placed by rejection sampling so no two spawn boxes overlap.
pub fn spawn_world(cfg: &ValidatedConfig, seed: u64) -> Result<WorldState, SpawnError> {
    let total = cfg.num_vehicles as u64 + cfg.num_pedestrians as u64 + 1;
    if total >= u16::MAX as u64 {
        return Err(SpawnError::TooManyActors(total));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "spawn"));

    let bounds = 80.0_f64.max(cfg.max_distance_m + 30.0);
    // Actors concentrate in a disc around the ego so the sensors have
    // something to look at; the disc stays inside the wrap bounds.
    let spawn_radius = (cfg.max_distance_m + 10.0).clamp(30.0, bounds - 5.0);

    let ego_extent = vehicle_extent(cfg.ego_type);
    let mut actors = vec![ActorState {
        actor_id: 1,
        class: ActorClass::Ego,
        pose: Pose::new(Vec3::new(0.0, 0.0, ego_extent.z), RotationRpy::default()),
        velocity: Vec3::new(8.0, 0.0, 0.0),
        yaw_rate: rng.gen_range(-5.0..5.0),
        extent: ego_extent,
    }];

    let place = |actors: &Vec<ActorState>,
                     rng: &mut ChaCha8Rng,
                     extent: Vec3,
                     index: usize|
     -> Result<(Vec3, RotationRpy), SpawnError> {
        let radius_xy = extent.x.hypot(extent.y);
        for _ in 0..MAX_SPAWN_ATTEMPTS {
            let x = rng.gen_range(-spawn_radius..spawn_radius);
            let y = rng.gen_range(-spawn_radius..spawn_radius);
            let yaw = rng.gen_range(-180.0..180.0);
            let pos = Vec3::new(x, y, extent.z);
            let clear = actors.iter().all(|a| {
                let other_r = a.extent.x.hypot(a.extent.y);
                let dx = a.pose.location.x - pos.x;
                let dy = a.pose.location.y - pos.y;
                dx.hypot(dy) > radius_xy + other_r + 1.0
            });
            if clear {
                return Ok((pos, RotationRpy::yaw_only(yaw)));
            }
        }
        Err(SpawnError::Saturated { actor: index, attempts: MAX_SPAWN_ATTEMPTS })
    };

    for i in 0..cfg.num_vehicles {
        let preset = VEHICLE_PRESETS[rng.gen_range(0..VEHICLE_PRESETS.len())];
        let extent = vehicle_extent(preset);
        let (pos, rot) = place(&actors, &mut rng, extent, actors.len())?;
        let speed = rng.gen_range(2.0_f64..15.0).min(MAX_VEHICLE_SPEED);
        actors.push(ActorState {
            actor_id: 2 + i as u16,
            class: ActorClass::Vehicle,
            pose: Pose::new(pos, rot),
            velocity: Vec3::new(speed, 0.0, 0.0),
            yaw_rate: rng.gen_range(-8.0..8.0),
            extent,
        });
    }
    for i in 0..cfg.num_pedestrians {
        let (pos, rot) = place(&actors, &mut rng, PEDESTRIAN_EXTENT, actors.len())?;
        let speed = rng.gen_range(0.5_f64..2.5).min(MAX_PEDESTRIAN_SPEED);
        actors.push(ActorState {
            actor_id: 2 + cfg.num_vehicles as u16 + i as u16,
            class: ActorClass::Pedestrian,
            pose: Pose::new(pos, rot),
            velocity: Vec3::new(speed, 0.0, 0.0),
            yaw_rate: rng.gen_range(-20.0..20.0),
            extent: PEDESTRIAN_EXTENT,
        });
    }

    Ok(WorldState {
        frame_id: 0,
        sim_time_s: 0.0,
        actors,
        ego_id: 1,
        weather: cfg.weather.clone(),
        bounds,
    })
}

fn wrap_coord(p: f64, bounds: f64) -> f64 {
    (p + bounds).rem_euclid(2.0 * bounds) - bounds
}

/// Advance exactly one frame: `substeps_per_frame` kinematic sub-steps of
/// `substep_dt_s` each. The trajectory depends only on the sub-step sequence,
/// so runs at different frame rates with the same substep dt coincide.
pub fn step_world(w: &WorldState, plan: &TimingPlan) -> WorldState {
    let mut next = w.clone();
    let dt = plan.substep_dt_s;
    for _ in 0..plan.substeps_per_frame {
        for a in &mut next.actors {
            let step = a.world_velocity().scale(dt);
            a.pose.location = Vec3::new(
                wrap_coord(a.pose.location.x + step.x, next.bounds),
                wrap_coord(a.pose.location.y + step.y, next.bounds),
                a.pose.location.z + step.z,
            );
            a.pose.rotation.yaw = normalize_deg(a.pose.rotation.yaw + a.yaw_rate * dt);
        }
    }
    next.frame_id = w.frame_id + 1;
    next.sim_time_s = next.frame_id as f64 * plan.fixed_timestep_s;
    next
}

/// Accelerometer + gyroscope sample for the ego between two consecutive frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuReading {
    /// Finite-difference acceleration plus gravity, expressed in the ego frame.
    pub accel: Vec3,
    /// Degrees per second; the kinematic model only rotates about z.
    pub gyro: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnssReading {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
}

impl ImuReading {
    pub const WIRE_SIZE: usize = 48;

    pub fn to_le_bytes(&self) -> [u8; Self::WIRE_SIZE] {
        let mut out = [0u8; Self::WIRE_SIZE];
        for (i, v) in [
            self.accel.x, self.accel.y, self.accel.z,
            self.gyro.x, self.gyro.y, self.gyro.z,
        ]
        .iter()
        .enumerate()
        {
            out[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != Self::WIRE_SIZE {
            return None;
        }
        let f = |i: usize| f64::from_le_bytes(b[i * 8..(i + 1) * 8].try_into().unwrap());
        Some(ImuReading {
            accel: Vec3::new(f(0), f(1), f(2)),
            gyro: Vec3::new(f(3), f(4), f(5)),
        })
    }
}

impl GnssReading {
    pub const WIRE_SIZE: usize = 24;

    pub fn to_le_bytes(&self) -> [u8; Self::WIRE_SIZE] {
        let mut out = [0u8; Self::WIRE_SIZE];
        out[0..8].copy_from_slice(&self.lat_deg.to_le_bytes());
        out[8..16].copy_from_slice(&self.lon_deg.to_le_bytes());
        out[16..24].copy_from_slice(&self.alt_m.to_le_bytes());
        out
    }

    pub fn from_le_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != Self::WIRE_SIZE {
            return None;
        }
        let f = |i: usize| f64::from_le_bytes(b[i * 8..(i + 1) * 8].try_into().unwrap());
        Some(GnssReading { lat_deg: f(0), lon_deg: f(1), alt_m: f(2) })
    }
}

/// IMU and GNSS readings from ego kinematics of two consecutive frames.
pub fn sample_inertial(prev: &WorldState, cur: &WorldState, dt: f64) -> (ImuReading, GnssReading) {
    let ego_prev = prev.ego();
    let ego_cur = cur.ego();
    let accel_world = ego_cur
        .world_velocity()
        .sub(ego_prev.world_velocity())
        .scale(1.0 / dt)
        .add(GRAVITY);
    let to_ego = rotation_matrix(ego_cur.pose.rotation).transpose();
    let imu = ImuReading {
        accel: to_ego.mul_vec(accel_world),
        gyro: Vec3::new(0.0, 0.0, ego_cur.yaw_rate),
    };
    let loc = ego_cur.pose.location;
    let gnss = GnssReading {
        lat_deg: loc.x / METERS_PER_DEGREE,
        lon_deg: loc.y / METERS_PER_DEGREE,
        alt_m: loc.z,
    };
    (imu, gnss)
}
