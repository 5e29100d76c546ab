//! Run configuration: parsing of the JSON config document, cross-field
//! validation, and the derived timing plan (fixed timestep, sub-step split).
//!
//! Unknown keys are hard errors. `"random"` map/weather choices are resolved
//! from the seed at parse time so the recorded config names the actual value.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

/// Maps the world generator knows how to lay out.
pub const MAPS: [&str; 8] = [
    "suburb",
    "downtown",
    "highway",
    "rural",
    "industrial",
    "harbor",
    "campus",
    "ring_road",
];

/// Weather presets. Weather is recorded metadata; it does not alter physics.
pub const WEATHERS: [&str; 8] = [
    "clear_noon",
    "cloudy_noon",
    "wet_noon",
    "rain_noon",
    "fog_morning",
    "clear_sunset",
    "storm_evening",
    "overcast_dawn",
];

/// Default ceiling on per-sensor lag when the config does not override it.
pub const DEFAULT_MAX_SENSOR_LAG: u32 = 8;

/// Fixed batch duration for memory-mapped image storage, in seconds.
pub const BATCH_DURATION_S: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Rgb,
    Depth,
    Instance,
    Lidar,
    Imu,
    Gnss,
}

impl SensorKind {
    pub fn is_camera(self) -> bool {
        matches!(self, SensorKind::Rgb | SensorKind::Depth | SensorKind::Instance)
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SensorKind::Rgb => "rgb",
            SensorKind::Depth => "depth",
            SensorKind::Instance => "instance",
            SensorKind::Lidar => "lidar",
            SensorKind::Imu => "imu",
            SensorKind::Gnss => "gnss",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoType {
    Sedan,
    Suv,
    Truck,
    Van,
    Hatchback,
}

/// Sensor mount offset relative to the ego body, meters and degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MountPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl MountPose {
    pub fn pose(&self) -> crate::geometry::Pose {
        crate::geometry::Pose::new(
            crate::geometry::Vec3::new(self.x, self.y, self.z),
            crate::geometry::RotationRpy::new(self.roll, self.pitch, self.yaw),
        )
    }
}

/// One sensor on the rig, fully resolved (defaults filled in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub sensor_id: String,
    pub kind: SensorKind,
    pub mount_pose: MountPose,
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub rotation_hz: f64,
    pub points_per_second: u32,
    pub range_m: f64,
    pub lag_frames: u32,
}

impl SensorSpec {
    /// Stored bytes per pixel for image kinds. Depth uses 3 code bytes plus
    /// one pad byte so every image frame is W·H·4.
    pub const IMAGE_CHANNELS: u32 = 4;

    pub fn frame_size_bytes(&self) -> Option<u64> {
        self.kind
            .is_camera()
            .then(|| self.width as u64 * self.height as u64 * Self::IMAGE_CHANNELS as u64)
    }

    /// Azimuth columns per revolution: points_per_second / (channels · fps),
    /// truncating division.
    pub fn lidar_columns(&self, fps: u32) -> u32 {
        self.points_per_second / (self.channels * fps)
    }
}

/// Full run parameterization. Field names are the config document schema.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub map_id: String,
    pub episodes: u32,
    pub num_vehicles: u32,
    pub num_pedestrians: u32,
    pub save_vehicle_gt: bool,
    pub save_pedestrian_gt: bool,
    pub duration_s: f64,
    pub fps: u32,
    pub image_width: u32,
    pub image_height: u32,
    pub max_distance_m: f64,
    pub min_lidar_points: u32,
    pub ego_type: EgoType,
    pub weather: String,
    pub capture_every_step: bool,
    pub save_ego_motion: bool,
    pub seed: i64,
    pub sensors: Vec<SensorSpec>,
    pub max_substep_dt_s: f64,
    pub max_substeps: u32,
    pub sensor_lag_frames: u32,
    pub max_sensor_lag_frames: u32,
    pub in_flight_ticks: u32,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn seed_u64(&self) -> u64 {
        self.seed as u64
    }
}

/// One violated constraint, naming the field and the bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigViolation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("malformed config document: {0}")]
    Malformed(String),
    #[error("invalid config:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ConfigViolation>),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

/// A [`RunConfig`] that passed [`validate_config`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidatedConfig(RunConfig);

impl ValidatedConfig {
    pub fn get(&self) -> &RunConfig {
        &self.0
    }

    pub fn into_inner(self) -> RunConfig {
        self.0
    }
}

impl std::ops::Deref for ValidatedConfig {
    type Target = RunConfig;
    fn deref(&self) -> &RunConfig {
        &self.0
    }
}

/// Derived tick timing: `fixed_timestep_s = 1/fps`, total frame count, and
/// the sub-step split satisfying `substep_dt_s <= max_substep_dt_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingPlan {
    pub fixed_timestep_s: f64,
    pub total_frames: u64,
    pub substeps_per_frame: u32,
    pub substep_dt_s: f64,
}

// Raw document shape: permissive numeric types so range errors name the
// field instead of surfacing as serde type noise.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    map_id: Option<String>,
    #[serde(default)]
    episodes: Option<i64>,
    #[serde(default)]
    num_vehicles: Option<i64>,
    #[serde(default)]
    num_pedestrians: Option<i64>,
    #[serde(default)]
    save_vehicle_gt: Option<bool>,
    #[serde(default)]
    save_pedestrian_gt: Option<bool>,
    duration_s: f64,
    fps: i64,
    #[serde(default)]
    image_width: Option<i64>,
    #[serde(default)]
    image_height: Option<i64>,
    #[serde(default)]
    max_distance_m: Option<f64>,
    #[serde(default)]
    min_lidar_points: Option<i64>,
    #[serde(default)]
    ego_type: Option<EgoType>,
    #[serde(default)]
    weather: Option<String>,
    #[serde(default)]
    capture_every_step: Option<bool>,
    #[serde(default)]
    save_ego_motion: Option<bool>,
    #[serde(default)]
    seed: Option<i64>,
    sensors: Vec<RawSensor>,
    #[serde(default)]
    max_substep_dt_s: Option<f64>,
    #[serde(default)]
    max_substeps: Option<i64>,
    #[serde(default)]
    sensor_lag_frames: Option<i64>,
    #[serde(default)]
    max_sensor_lag_frames: Option<i64>,
    #[serde(default)]
    in_flight_ticks: Option<i64>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSensor {
    sensor_id: String,
    kind: SensorKind,
    #[serde(default)]
    mount_pose: MountPose,
    #[serde(default)]
    fov_deg: Option<f64>,
    #[serde(default)]
    width: Option<i64>,
    #[serde(default)]
    height: Option<i64>,
    #[serde(default)]
    channels: Option<i64>,
    #[serde(default)]
    rotation_hz: Option<f64>,
    #[serde(default)]
    points_per_second: Option<i64>,
    #[serde(default)]
    range_m: Option<f64>,
    #[serde(default)]
    lag_frames: Option<i64>,
}

fn to_u32(field: &str, v: i64, out: &mut Vec<ConfigViolation>) -> u32 {
    if !(0..=u32::MAX as i64).contains(&v) {
        out.push(ConfigViolation {
            field: field.to_string(),
            message: format!("must be a non-negative integer <= {}, got {v}", u32::MAX),
        });
        0
    } else {
        v as u32
    }
}

/// Resolve `"random"` against a seeded choice so the pick is recorded.
fn resolve_choice(value: Option<String>, options: &[&str], seed: u64, salt: u64) -> String {
    match value {
        Some(v) if v != "random" => v,
        _ => options[(crate::hash::splitmix64(seed ^ salt) % options.len() as u64) as usize]
            .to_string(),
    }
}

/// Parse and normalize a config document. All defaults are filled, `"random"`
/// map/weather are resolved from the seed, and field-range violations are
/// rejected with the offending field named.
pub fn parse_run_config(document: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig =
        serde_json::from_str(document).map_err(|e| ConfigError::Malformed(e.to_string()))?;
    let mut viol = Vec::new();

    let seed = raw.seed.unwrap_or(0);
    let fps = to_u32("fps", raw.fps, &mut viol);
    let sensor_lag_default = to_u32("sensor_lag_frames", raw.sensor_lag_frames.unwrap_or(0), &mut viol);
    let image_width = to_u32("image_width", raw.image_width.unwrap_or(1280), &mut viol);
    let image_height = to_u32("image_height", raw.image_height.unwrap_or(720), &mut viol);

    let sensors = raw
        .sensors
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let f = |name: &str| format!("sensors[{i}].{name}");
            SensorSpec {
                kind: s.kind,
                mount_pose: s.mount_pose,
                fov_deg: s.fov_deg.unwrap_or(90.0),
                width: s.width.map(|v| to_u32(&f("width"), v, &mut viol)).unwrap_or(image_width),
                height: s.height.map(|v| to_u32(&f("height"), v, &mut viol)).unwrap_or(image_height),
                channels: to_u32(&f("channels"), s.channels.unwrap_or(32), &mut viol),
                rotation_hz: s.rotation_hz.unwrap_or(10.0),
                points_per_second: to_u32(
                    &f("points_per_second"),
                    s.points_per_second.unwrap_or(600_000),
                    &mut viol,
                ),
                range_m: s.range_m.unwrap_or(100.0),
                lag_frames: s
                    .lag_frames
                    .map(|v| to_u32(&f("lag_frames"), v, &mut viol))
                    .unwrap_or(sensor_lag_default),
                sensor_id: s.sensor_id,
            }
        })
        .collect();

    let cfg = RunConfig {
        map_id: resolve_choice(raw.map_id, &MAPS, seed as u64, 0x6d61705f69640001),
        episodes: to_u32("episodes", raw.episodes.unwrap_or(1), &mut viol),
        num_vehicles: to_u32("num_vehicles", raw.num_vehicles.unwrap_or(0), &mut viol),
        num_pedestrians: to_u32("num_pedestrians", raw.num_pedestrians.unwrap_or(0), &mut viol),
        save_vehicle_gt: raw.save_vehicle_gt.unwrap_or(true),
        save_pedestrian_gt: raw.save_pedestrian_gt.unwrap_or(true),
        duration_s: raw.duration_s,
        fps,
        image_width,
        image_height,
        max_distance_m: raw.max_distance_m.unwrap_or(50.0),
        min_lidar_points: to_u32("min_lidar_points", raw.min_lidar_points.unwrap_or(10), &mut viol),
        ego_type: raw.ego_type.unwrap_or(EgoType::Sedan),
        weather: resolve_choice(raw.weather, &WEATHERS, seed as u64, 0x77656174686572aa),
        capture_every_step: raw.capture_every_step.unwrap_or(true),
        save_ego_motion: raw.save_ego_motion.unwrap_or(true),
        seed,
        sensors,
        max_substep_dt_s: raw.max_substep_dt_s.unwrap_or(1.0 / 120.0),
        max_substeps: to_u32("max_substeps", raw.max_substeps.unwrap_or(10), &mut viol),
        sensor_lag_frames: sensor_lag_default,
        max_sensor_lag_frames: to_u32(
            "max_sensor_lag_frames",
            raw.max_sensor_lag_frames.unwrap_or(DEFAULT_MAX_SENSOR_LAG as i64),
            &mut viol,
        ),
        in_flight_ticks: to_u32("in_flight_ticks", raw.in_flight_ticks.unwrap_or(1), &mut viol),
        output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("out")),
    };

    viol.extend(field_violations(&cfg));
    if viol.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(dedup_violations(viol)))
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, ConfigError> {
    parse_run_config(&std::fs::read_to_string(path)?)
}

fn dedup_violations(mut v: Vec<ConfigViolation>) -> Vec<ConfigViolation> {
    let mut seen = std::collections::HashSet::new();
    v.retain(|x| seen.insert((x.field.clone(), x.message.clone())));
    v
}

fn field_violations(cfg: &RunConfig) -> Vec<ConfigViolation> {
    let mut out = Vec::new();
    let mut push = |field: &str, message: String| {
        out.push(ConfigViolation { field: field.to_string(), message });
    };

    if cfg.fps == 0 {
        push("fps", "fps must be positive".into());
    }
    if !(cfg.duration_s > 0.0) || !cfg.duration_s.is_finite() {
        push("duration_s", format!("must be positive seconds, got {}", cfg.duration_s));
    }
    if cfg.episodes == 0 {
        push("episodes", "must be at least 1".into());
    }
    if cfg.image_width == 0 || cfg.image_height == 0 {
        push("image_width/image_height", "image dimensions must be positive".into());
    }
    if !(cfg.max_distance_m > 0.0) {
        push("max_distance_m", format!("must be positive meters, got {}", cfg.max_distance_m));
    }
    if !(cfg.max_substep_dt_s > 0.0) || !cfg.max_substep_dt_s.is_finite() {
        push("max_substep_dt_s", format!("must be positive seconds, got {}", cfg.max_substep_dt_s));
    }
    if cfg.max_substeps == 0 {
        push("max_substeps", "must be at least 1".into());
    }
    if cfg.in_flight_ticks == 0 {
        push("in_flight_ticks", "must be at least 1".into());
    }
    if cfg.fps > 0 && cfg.max_substep_dt_s > 0.0 && cfg.max_substeps > 0 {
        let fixed = 1.0 / cfg.fps as f64;
        let budget = cfg.max_substep_dt_s * cfg.max_substeps as f64;
        if fixed > budget {
            push(
                "fps/max_substep_dt_s/max_substeps",
                format!(
                    "fixed timestep 1/fps = {fixed:.6} s exceeds max_substep_dt_s * max_substeps = {budget:.6} s"
                ),
            );
        }
    }
    if !MAPS.contains(&cfg.map_id.as_str()) {
        push("map_id", format!("unknown map '{}', expected one of {MAPS:?} or \"random\"", cfg.map_id));
    }
    if !WEATHERS.contains(&cfg.weather.as_str()) {
        push(
            "weather",
            format!("unknown weather '{}', expected one of {WEATHERS:?} or \"random\"", cfg.weather),
        );
    }
    let total_actors = cfg.num_vehicles as u64 + cfg.num_pedestrians as u64 + 1;
    if total_actors >= u16::MAX as u64 {
        push(
            "num_vehicles/num_pedestrians",
            format!("actor count {total_actors} must stay below {}", u16::MAX),
        );
    }

    if cfg.sensors.is_empty() {
        push("sensors", "at least one sensor is required".into());
    }
    let mut ids = std::collections::HashSet::new();
    for (i, s) in cfg.sensors.iter().enumerate() {
        let f = |name: &str| format!("sensors[{i}].{name}");
        if s.sensor_id.is_empty() {
            out.push(ConfigViolation { field: f("sensor_id"), message: "must not be empty".into() });
        }
        if !ids.insert(s.sensor_id.clone()) {
            out.push(ConfigViolation {
                field: f("sensor_id"),
                message: format!("duplicate sensor id '{}'", s.sensor_id),
            });
        }
        if s.kind.is_camera() {
            if !(s.fov_deg > 0.0 && s.fov_deg < 180.0) {
                out.push(ConfigViolation {
                    field: f("fov_deg"),
                    message: format!("must be in (0, 180) degrees, got {}", s.fov_deg),
                });
            }
            if s.width == 0 || s.height == 0 {
                out.push(ConfigViolation {
                    field: f("width/height"),
                    message: "camera sensors require positive width and height".into(),
                });
            }
        }
        if s.kind == SensorKind::Lidar {
            if s.channels == 0 {
                out.push(ConfigViolation { field: f("channels"), message: "must be at least 1".into() });
            }
            if !(s.rotation_hz > 0.0) {
                out.push(ConfigViolation {
                    field: f("rotation_hz"),
                    message: format!("must be positive, got {}", s.rotation_hz),
                });
            }
            if !(s.range_m > 0.0) {
                out.push(ConfigViolation {
                    field: f("range_m"),
                    message: format!("must be positive meters, got {}", s.range_m),
                });
            }
            if cfg.fps > 0 && s.channels > 0 && s.points_per_second < s.channels * cfg.fps {
                out.push(ConfigViolation {
                    field: f("points_per_second"),
                    message: format!(
                        "must be at least channels * fps = {} for one azimuth column per revolution",
                        s.channels * cfg.fps
                    ),
                });
            }
        }
        if s.lag_frames > cfg.max_sensor_lag_frames {
            out.push(ConfigViolation {
                field: f("lag_frames"),
                message: format!(
                    "lag {} exceeds max_sensor_lag_frames {}",
                    s.lag_frames, cfg.max_sensor_lag_frames
                ),
            });
        }
    }
    out
}

/// Check every invariant; returns the config unchanged or every violation.
pub fn validate_config(cfg: &RunConfig) -> Result<ValidatedConfig, Vec<ConfigViolation>> {
    let viol = field_violations(cfg);
    if viol.is_empty() {
        Ok(ValidatedConfig(cfg.clone()))
    } else {
        Err(dedup_violations(viol))
    }
}

/// Smallest substep count `n <= max_substeps` with `fixed/n <= max_substep_dt_s`.
pub fn derive_timing(cfg: &ValidatedConfig) -> TimingPlan {
    let fixed = 1.0 / cfg.fps as f64;
    let mut n = ((fixed / cfg.max_substep_dt_s).ceil() as u32).clamp(1, cfg.max_substeps);
    // Snap down if a smaller count already satisfies the f64 comparison the
    // validator used (guards against ratio rounding just above an integer).
    while n > 1 && fixed / (n - 1) as f64 <= cfg.max_substep_dt_s {
        n -= 1;
    }
    TimingPlan {
        fixed_timestep_s: fixed,
        total_frames: (cfg.duration_s * cfg.fps as f64).round() as u64,
        substeps_per_frame: n,
        substep_dt_s: fixed / n as f64,
    }
}

/// 64-bit digest of the canonical config serialization, used by the HELLO
/// exchange to confirm both sides run the same configuration.
pub fn config_digest(cfg: &RunConfig) -> u64 {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    crate::hash::fnv1a64(canonical.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_doc() -> String {
        r#"{
            "duration_s": 10.0,
            "fps": 30,
            "sensors": [ {"sensor_id": "cam0", "kind": "rgb"} ]
        }"#
        .to_string()
    }

    #[test]
    fn parse_fills_defaults() {
        let cfg = parse_run_config(&minimal_doc()).unwrap();
        assert_eq!(cfg.fps, 30);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.episodes, 1);
        assert_eq!(cfg.sensors[0].width, 1280);
        assert_eq!(cfg.sensors[0].height, 720);
        assert_eq!(cfg.in_flight_ticks, 1);
        assert!((cfg.max_substep_dt_s - 1.0 / 120.0).abs() < 1e-15);
        assert_eq!(cfg.max_substeps, 10);
        // "random" resolved to a concrete pick.
        assert!(MAPS.contains(&cfg.map_id.as_str()));
        assert!(WEATHERS.contains(&cfg.weather.as_str()));
    }

    #[test]
    fn random_resolution_is_seed_deterministic() {
        let a = parse_run_config(&minimal_doc()).unwrap();
        let b = parse_run_config(&minimal_doc()).unwrap();
        assert_eq!(a.map_id, b.map_id);
        assert_eq!(a.weather, b.weather);

        let doc_seeded = minimal_doc().replace("\"fps\": 30", "\"fps\": 30, \"seed\": 99");
        let c = parse_run_config(&doc_seeded).unwrap();
        assert_eq!(c.seed, 99);
    }

    #[test]
    fn negative_fps_is_named() {
        let doc = minimal_doc().replace("\"fps\": 30", "\"fps\": -5");
        match parse_run_config(&doc) {
            Err(ConfigError::Invalid(v)) => {
                assert!(v.iter().any(|x| x.message.contains("fps must be positive")), "{v:?}");
            }
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let doc = minimal_doc().replace("\"fps\": 30", "\"fps\": 30, \"frames_per_sec\": 30");
        match parse_run_config(&doc) {
            Err(ConfigError::Malformed(msg)) => assert!(msg.contains("unknown field"), "{msg}"),
            other => panic!("expected malformed, got {other:?}"),
        }
    }

    #[test]
    fn missing_required_key_rejected() {
        match parse_run_config(r#"{"fps": 30, "sensors": []}"#) {
            Err(ConfigError::Malformed(msg)) => assert!(msg.contains("duration_s"), "{msg}"),
            other => panic!("expected malformed, got {other:?}"),
        }
    }

    #[test]
    fn substep_constraint_examples() {
        let mut cfg = parse_run_config(&minimal_doc()).unwrap();
        cfg.max_substep_dt_s = 1.0 / 120.0;
        cfg.max_substeps = 4;
        assert!(validate_config(&cfg).is_ok());

        cfg.max_substeps = 2;
        let errs = validate_config(&cfg).unwrap_err();
        assert!(errs.iter().any(|v| v.field.contains("max_substeps")), "{errs:?}");

        // Equality boundary: 1/120 <= 1 * 1/120.
        cfg.fps = 120;
        cfg.max_substeps = 1;
        assert!(validate_config(&cfg).is_ok());
    }

    #[test]
    fn validation_reports_every_violation() {
        let mut cfg = parse_run_config(&minimal_doc()).unwrap();
        cfg.fps = 0;
        cfg.max_distance_m = -1.0;
        cfg.sensors.clear();
        let errs = validate_config(&cfg).unwrap_err();
        assert!(errs.len() >= 3, "{errs:?}");
    }

    #[test]
    fn timing_examples() {
        let cfg = parse_run_config(&minimal_doc()).unwrap();
        let mut cfg = cfg;
        cfg.max_substep_dt_s = 1.0 / 120.0;
        cfg.max_substeps = 4;
        let plan = derive_timing(&validate_config(&cfg).unwrap());
        assert_eq!(plan.total_frames, 300);
        assert!((plan.fixed_timestep_s - 1.0 / 30.0).abs() < 1e-15);
        assert_eq!(plan.substeps_per_frame, 4);
        assert!((plan.substep_dt_s - 1.0 / 120.0).abs() < 1e-15);

        cfg.fps = 120;
        let plan = derive_timing(&validate_config(&cfg).unwrap());
        assert_eq!(plan.substeps_per_frame, 1);
    }

    #[test]
    fn substep_product_matches_fixed_within_one_ulp() {
        for fps in [1u32, 7, 24, 30, 60, 90, 120, 144] {
            for (msdt, ms) in [(1.0 / 120.0, 10u32), (0.004, 16), (0.011, 9), (1.0, 1)] {
                let mut cfg = parse_run_config(&minimal_doc()).unwrap();
                cfg.fps = fps;
                cfg.max_substep_dt_s = msdt;
                cfg.max_substeps = ms;
                if let Ok(v) = validate_config(&cfg) {
                    let plan = derive_timing(&v);
                    let product = plan.substep_dt_s * plan.substeps_per_frame as f64;
                    let ulp = plan.fixed_timestep_s * f64::EPSILON * plan.substeps_per_frame as f64;
                    assert!(
                        (product - plan.fixed_timestep_s).abs() <= ulp,
                        "fps={fps} msdt={msdt} ms={ms}: {product} vs {}",
                        plan.fixed_timestep_s
                    );
                    assert!(plan.substep_dt_s <= cfg.max_substep_dt_s * (1.0 + f64::EPSILON));
                    assert!(plan.substeps_per_frame <= cfg.max_substeps);
                }
            }
        }
    }

    #[test]
    fn serialize_parse_round_trip() {
        let doc = r#"{
            "map_id": "downtown",
            "duration_s": 5.0,
            "fps": 20,
            "seed": 1234,
            "weather": "rain_noon",
            "num_vehicles": 3,
            "sensors": [
                {"sensor_id": "cam0", "kind": "rgb", "fov_deg": 100.0,
                 "mount_pose": {"x": 1.5, "z": 2.0}},
                {"sensor_id": "lidar0", "kind": "lidar", "channels": 16,
                 "points_per_second": 96000, "lag_frames": 2}
            ]
        }"#;
        let cfg = parse_run_config(doc).unwrap();
        let serialized = serde_json::to_string_pretty(&cfg).unwrap();
        let reparsed = parse_run_config(&serialized).unwrap();
        assert_eq!(cfg, reparsed);
        assert!(validate_config(&reparsed).is_ok());
        assert_eq!(config_digest(&cfg), config_digest(&reparsed));
    }

    #[test]
    fn substep_gate_property() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let base = parse_run_config(&minimal_doc()).unwrap();
        for _ in 0..10_000 {
            let mut cfg = base.clone();
            cfg.fps = rng.gen_range(1..=240);
            cfg.max_substep_dt_s = rng.gen_range(0.0005..0.05);
            cfg.max_substeps = rng.gen_range(1..=32);
            let feasible = 1.0 / cfg.fps as f64 <= cfg.max_substep_dt_s * cfg.max_substeps as f64;
            let result = validate_config(&cfg);
            assert_eq!(
                result.is_ok(),
                feasible,
                "fps={} msdt={} ms={}",
                cfg.fps,
                cfg.max_substep_dt_s,
                cfg.max_substeps
            );
        }
    }
}
