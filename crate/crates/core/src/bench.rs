//! Scaling experiments: total collection time versus frame count, camera
//! count, or lidar count, comparing the baseline and pipelined collectors
//! over repeated seeded runs.
//!
//! Each run pairs a fresh server child process with an in-process collector;
//! wall time is the collector's first-tick-to-manifest-close clock. Before
//! any timing, one verification run per configuration asserts that the two
//! modes produce identical stored bytes; the suite aborts on divergence.
//! The conversion pass is excluded from run timing and measured separately.

use crate::config::{parse_run_config, validate_config, RunConfig, ValidatedConfig};
use crate::pipeline::{run_episode, CollectorOptions, Mode, PipelineError};
use crate::server::{connect_retry, Endpoint};
use crate::store::StoreError;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Frames,
    Cameras,
    Lidars,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Frames => "frames",
            Axis::Cameras => "cameras",
            Axis::Lidars => "lidars",
        }
    }

    pub fn parse(s: &str) -> Option<Axis> {
        match s {
            "frames" => Some(Axis::Frames),
            "cameras" => Some(Axis::Cameras),
            "lidars" => Some(Axis::Lidars),
            _ => None,
        }
    }
}

/// Timing samples for one (axis value, mode) cell.
#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub axis: Axis,
    pub axis_value: u32,
    pub mode: String,
    pub repetitions: u32,
    pub wall_times_s: Vec<f64>,
    pub mean_s: f64,
    pub std_s: f64,
    /// Set when repetitions == 1: the zero std is a placeholder, not a measurement.
    pub single_rep: bool,
    pub failed: bool,
    pub failure: Option<String>,
    /// Post-run conversion time for this configuration, measured once.
    pub conversion_s: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("config: {0}")]
    Config(String),
    #[error("output equivalence violated for {axis}={value}: {detail}")]
    Equivalence { axis: &'static str, value: u32, detail: String },
}

pub struct BenchOptions {
    pub axis: Axis,
    pub values: Vec<u32>,
    pub repetitions: u32,
    pub base_config: RunConfig,
    /// Binary to spawn for `serve`; usually the current executable.
    pub server_bin: PathBuf,
    /// Scratch space for configs, sockets, and run outputs.
    pub work_dir: PathBuf,
    pub modes: Vec<Mode>,
    /// Collector worker count (0 = host parallelism).
    pub workers: usize,
    /// Assert cross-mode byte equality once per configuration before timing.
    pub verify_equivalence: bool,
    /// Measure the conversion pass once per configuration.
    pub measure_conversion: bool,
}

/// The base sensor rig both presets share: four surround RGB cameras, one
/// forward depth camera, one roof lidar, IMU, GNSS.
fn rig_json(width: u32, height: u32) -> String {
    let mut sensors = Vec::new();
    for (i, yaw) in [0.0, 90.0, 180.0, 270.0].iter().enumerate() {
        sensors.push(format!(
            r#"{{"sensor_id": "cam_{i:02}", "kind": "rgb", "width": {width}, "height": {height},
                "mount_pose": {{"x": 1.2, "z": 1.6, "yaw": {yaw}}}}}"#
        ));
    }
    sensors.push(format!(
        r#"{{"sensor_id": "depth_front", "kind": "depth", "width": {width}, "height": {height},
            "mount_pose": {{"x": 1.2, "z": 1.6}}}}"#
    ));
    sensors.push(
        r#"{"sensor_id": "lidar_top", "kind": "lidar", "channels": 32,
            "points_per_second": 600000, "range_m": 100.0,
            "mount_pose": {"z": 1.9}}"#
            .to_string(),
    );
    sensors.push(r#"{"sensor_id": "imu_0", "kind": "imu"}"#.to_string());
    sensors.push(r#"{"sensor_id": "gnss_0", "kind": "gnss"}"#.to_string());
    format!("[{}]", sensors.join(","))
}

fn preset(frames: u32, fps: u32, width: u32, height: u32, vehicles: u32, pedestrians: u32) -> RunConfig {
    let doc = format!(
        r#"{{
            "map_id": "downtown",
            "duration_s": {},
            "fps": {fps},
            "num_vehicles": {vehicles},
            "num_pedestrians": {pedestrians},
            "image_width": {width},
            "image_height": {height},
            "max_distance_m": 50.0,
            "min_lidar_points": 5,
            "weather": "clear_noon",
            "seed": 7,
            "max_substep_dt_s": 0.008333333333333333,
            "max_substeps": 8,
            "sensors": {}
        }}"#,
        frames as f64 / fps as f64,
        rig_json(width, height),
    );
    parse_run_config(&doc).expect("preset parses")
}

/// Desk-scale workload: 300 frames at 640x360 with 20 actors. Finishes in
/// seconds per run on a small host.
pub fn desk_scale_config() -> RunConfig {
    preset(300, 30, 640, 360, 14, 6)
}

/// The large workload: 2000 frames at 1280x720 with 50+50 actors.
pub fn full_scale_config() -> RunConfig {
    preset(2000, 30, 1280, 720, 50, 50)
}

/// Apply one axis value to the base config.
pub fn config_for_value(base: &RunConfig, axis: Axis, value: u32) -> Result<RunConfig, BenchError> {
    let mut cfg = base.clone();
    match axis {
        Axis::Frames => {
            cfg.duration_s = value as f64 / cfg.fps as f64;
        }
        Axis::Cameras => {
            cfg.sensors.retain(|s| s.kind != crate::config::SensorKind::Rgb);
            let template = base
                .sensors
                .iter()
                .find(|s| s.kind == crate::config::SensorKind::Rgb)
                .cloned()
                .ok_or_else(|| BenchError::Config("base config has no rgb camera to scale".into()))?;
            for i in 0..value {
                let mut cam = template.clone();
                cam.sensor_id = format!("cam_{i:02}");
                cam.mount_pose.yaw = (i % 4) as f64 * 90.0;
                cfg.sensors.insert(i as usize, cam);
            }
        }
        Axis::Lidars => {
            cfg.sensors.retain(|s| s.kind != crate::config::SensorKind::Lidar);
            let template = base
                .sensors
                .iter()
                .find(|s| s.kind == crate::config::SensorKind::Lidar)
                .cloned()
                .ok_or_else(|| BenchError::Config("base config has no lidar to scale".into()))?;
            for i in 0..value {
                let mut lidar = template.clone();
                lidar.sensor_id = format!("lidar_{i:02}");
                lidar.mount_pose.x = i as f64 * 0.4;
                cfg.sensors.push(lidar);
            }
        }
    }
    Ok(cfg)
}

struct ServerChild(Child);

impl Drop for ServerChild {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn unique_socket(tag: &str) -> PathBuf {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    std::env::temp_dir().join(format!("simrig-{}-{tag}-{n}.sock", std::process::id()))
}

fn spawn_server(server_bin: &Path, cfg_path: &Path, endpoint: &Endpoint) -> std::io::Result<ServerChild> {
    let child = Command::new(server_bin)
        .arg("serve")
        .arg("--config")
        .arg(cfg_path)
        .arg("--listen")
        .arg(endpoint.to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()?;
    Ok(ServerChild(child))
}

/// One full run: spawn server, collect one episode, return its report.
fn one_run(
    opts: &BenchOptions,
    cfg: &ValidatedConfig,
    cfg_path: &Path,
    mode: Mode,
    run_dir: &Path,
) -> Result<crate::pipeline::EpisodeReport, BenchError> {
    let endpoint = Endpoint::Unix(unique_socket(mode.as_str()));
    let mut server = spawn_server(&opts.server_bin, cfg_path, &endpoint)?;
    let stream = connect_retry(&endpoint, Duration::from_secs(20)).map_err(|e| {
        BenchError::Config(format!("cannot reach spawned server at {endpoint}: {e}"))
    })?;
    let report = run_episode(
        cfg,
        stream,
        &CollectorOptions {
            mode,
            workers: opts.workers,
            episode: 0,
            episode_root: run_dir.to_path_buf(),
            fault: None,
        },
    )?;
    let status = server.0.wait()?;
    std::mem::forget(server);
    if !status.success() {
        return Err(BenchError::Config(format!("server child exited with {status}")));
    }
    if report.aborted {
        return Err(BenchError::Config(format!(
            "collection aborted: {}",
            report.abort_reason.clone().unwrap_or_default()
        )));
    }
    Ok(report)
}

fn hash_tree(root: &Path) -> Result<Vec<(String, u64)>, std::io::Error> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_str().unwrap().to_string();
                if rel.ends_with("report.json") {
                    continue;
                }
                let bytes = std::fs::read(&path)?;
                files.push((rel, crate::hash::fnv1a64(&bytes)));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Least-squares slope of y over x.
pub fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Run the full experiment matrix sequentially (one server+collector pair at
/// a time, so runs do not disturb each other's timing).
pub fn run_scaling_experiment(opts: &BenchOptions) -> Result<Vec<BenchResult>, BenchError> {
    std::fs::create_dir_all(&opts.work_dir)?;
    let mut results = Vec::new();

    for &value in &opts.values {
        let cfg_raw = config_for_value(&opts.base_config, opts.axis, value)?;
        let mut conversion_s: Option<f64> = None;

        // Resolve + validate once; write the config document for the server.
        let cell_dir = opts.work_dir.join(format!("{}_{value}", opts.axis.as_str()));
        std::fs::create_dir_all(&cell_dir)?;
        let cfg_path = cell_dir.join("config.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg_raw).expect("config serializes"))?;
        let cfg = validate_config(&cfg_raw)
            .map_err(|v| BenchError::Config(format!("{}={value}: {v:?}", opts.axis.as_str())))?;

        if opts.verify_equivalence {
            let verify_dir = cell_dir.join("verify");
            let p_dir = verify_dir.join("pipelined");
            let b_dir = verify_dir.join("baseline");
            one_run(opts, &cfg, &cfg_path, Mode::Pipelined, &p_dir)?;
            one_run(opts, &cfg, &cfg_path, Mode::Baseline, &b_dir)?;
            let hp = hash_tree(&p_dir)?;
            let hb = hash_tree(&b_dir)?;
            if hp != hb {
                let detail = hp
                    .iter()
                    .zip(&hb)
                    .find(|(a, b)| a != b)
                    .map(|(a, b)| format!("first divergence: {} vs {}", a.0, b.0))
                    .unwrap_or_else(|| "file sets differ".into());
                return Err(BenchError::Equivalence {
                    axis: opts.axis.as_str(),
                    value,
                    detail,
                });
            }
            if opts.measure_conversion {
                let t = Instant::now();
                crate::store::convert_outputs(&p_dir.join("manifest.json"), opts.workers)?;
                conversion_s = Some(t.elapsed().as_secs_f64());
            }
            std::fs::remove_dir_all(&verify_dir)?;
        }

        let mut cell: Vec<(Mode, Vec<f64>, Option<String>)> = opts
            .modes
            .iter()
            .map(|m| (*m, Vec::new(), None))
            .collect();
        'reps: for rep in 0..opts.repetitions {
            for (mode, times, failure) in cell.iter_mut() {
                if failure.is_some() {
                    continue;
                }
                let run_dir = cell_dir.join(format!("run_{}_{rep}", mode.as_str()));
                match one_run(opts, &cfg, &cfg_path, *mode, &run_dir) {
                    Ok(report) => times.push(report.wall_time_s),
                    Err(BenchError::Equivalence { .. }) => unreachable!(),
                    Err(e) => {
                        *failure = Some(e.to_string());
                        log::warn!(
                            "{}={value} {} rep {rep} failed: {e}",
                            opts.axis.as_str(),
                            mode.as_str()
                        );
                    }
                }
                let _ = std::fs::remove_dir_all(&run_dir);
            }
            if cell.iter().all(|(_, _, f)| f.is_some()) {
                break 'reps;
            }
        }

        for (mode, times, failure) in cell {
            let (mean_s, std_s) = mean_std(&times);
            results.push(BenchResult {
                axis: opts.axis,
                axis_value: value,
                mode: mode.as_str().into(),
                repetitions: times.len() as u32,
                single_rep: times.len() == 1,
                wall_times_s: times,
                mean_s,
                std_s,
                failed: failure.is_some(),
                failure,
                conversion_s,
            });
        }
    }
    Ok(results)
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub axis: Axis,
    pub value: u32,
    pub mode: String,
    pub repetitions: u32,
    pub mean_s: f64,
    pub std_s: f64,
    /// baseline_mean / pipelined_mean, on pipelined rows.
    pub speedup: Option<f64>,
    pub conversion_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    /// Per-unit incremental cost per mode, least squares over all samples.
    pub slopes: Vec<(String, f64)>,
}

pub fn summarize(results: &[BenchResult]) -> Summary {
    let mut rows = Vec::new();
    let mut values: Vec<u32> = results.iter().map(|r| r.axis_value).collect();
    values.sort_unstable();
    values.dedup();

    for &value in &values {
        let baseline_mean = results
            .iter()
            .find(|r| r.axis_value == value && r.mode == "baseline" && !r.failed)
            .map(|r| r.mean_s);
        for r in results.iter().filter(|r| r.axis_value == value) {
            let speedup = (r.mode == "pipelined" && !r.failed && r.mean_s > 0.0)
                .then(|| baseline_mean.map(|b| b / r.mean_s))
                .flatten();
            rows.push(SummaryRow {
                axis: r.axis,
                value,
                mode: r.mode.clone(),
                repetitions: r.repetitions,
                mean_s: r.mean_s,
                std_s: r.std_s,
                speedup,
                conversion_s: r.conversion_s,
            });
        }
    }

    let mut slopes = Vec::new();
    for mode in ["baseline", "pipelined"] {
        let points: Vec<(f64, f64)> = results
            .iter()
            .filter(|r| r.mode == mode && !r.failed)
            .flat_map(|r| {
                r.wall_times_s.iter().map(move |&t| (r.axis_value as f64, t))
            })
            .collect();
        if points.len() >= 2 {
            slopes.push((mode.to_string(), least_squares_slope(&points)));
        }
    }
    Summary { rows, slopes }
}

pub fn write_results_csv(path: &Path, results: &[BenchResult]) -> std::io::Result<()> {
    let mut out = String::from("axis,value,mode,rep,wall_s\n");
    for r in results {
        for (i, t) in r.wall_times_s.iter().enumerate() {
            writeln!(out, "{},{},{},{},{t}", r.axis.as_str(), r.axis_value, r.mode, i)
                .expect("string write");
        }
    }
    std::fs::write(path, out)
}

pub fn write_summary_csv(path: &Path, summary: &Summary) -> std::io::Result<()> {
    let mut out = String::from("axis,value,mode,repetitions,mean_s,std_s,speedup,conversion_s\n");
    for r in &summary.rows {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{},{}",
            r.axis.as_str(),
            r.value,
            r.mode,
            r.repetitions,
            r.mean_s,
            r.std_s,
            r.speedup.map(|s| format!("{s:.4}")).unwrap_or_default(),
            r.conversion_s.map(|s| format!("{s:.4}")).unwrap_or_default(),
        )
        .expect("string write");
    }
    for (mode, slope) in &summary.slopes {
        writeln!(out, "slope,,{mode},,{slope:.6},,,").expect("string write");
    }
    std::fs::write(path, out)
}

/// Minimal SVG line chart: mean wall time per axis value, one polyline per
/// mode, one-sigma whiskers.
pub fn write_plot_svg(path: &Path, axis: Axis, results: &[BenchResult]) -> std::io::Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const ML: f64 = 60.0;
    const MR: f64 = 20.0;
    const MT: f64 = 30.0;
    const MB: f64 = 50.0;

    let ok: Vec<&BenchResult> = results.iter().filter(|r| !r.failed).collect();
    let xs: Vec<f64> = ok.iter().map(|r| r.axis_value as f64).collect();
    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let x_max = xs.iter().cloned().fold(1.0, f64::max);
    let y_max = ok
        .iter()
        .map(|r| r.mean_s + r.std_s)
        .fold(1e-9, f64::max)
        * 1.1;

    let sx = |v: f64| ML + (v - x_min) / (x_max - x_min).max(1e-9) * (W - ML - MR);
    let sy = |v: f64| H - MB - v / y_max * (H - MT - MB);

    let mut svg = String::new();
    write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {W} {H}" font-family="monospace" font-size="12">"#
    )
    .unwrap();
    write!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    write!(
        svg,
        r#"<line x1="{ML}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - MB,
        W - MR,
        H - MB
    )
    .unwrap();
    write!(svg, r#"<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{}" stroke="black"/>"#, H - MB).unwrap();
    write!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (W + ML - MR) / 2.0,
        H - 12.0,
        axis.as_str()
    )
    .unwrap();
    write!(
        svg,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">wall time (s)</text>"#,
        (H - MB + MT) / 2.0,
        (H - MB + MT) / 2.0
    )
    .unwrap();
    // Y ticks.
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = sy(v);
        write!(
            svg,
            r#"<line x1="{}" y1="{y}" x2="{ML}" y2="{y}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#,
            ML - 4.0,
            ML - 8.0,
            y + 4.0
        )
        .unwrap();
    }

    for (mode, color) in [("baseline", "#c0392b"), ("pipelined", "#2471a3")] {
        let mut pts: Vec<(f64, f64, f64)> = ok
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| (r.axis_value as f64, r.mean_s, r.std_s))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pts.is_empty() {
            continue;
        }
        let poly: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1))).collect();
        write!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            poly.join(" ")
        )
        .unwrap();
        for (x, mean, std) in &pts {
            write!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                sx(*x),
                sy(*mean)
            )
            .unwrap();
            if *std > 0.0 {
                write!(
                    svg,
                    r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="{color}"/>"#,
                    sx(*x),
                    sy(mean + std),
                    sy((mean - std).max(0.0))
                )
                .unwrap();
            }
            // X tick label per sampled value.
            write!(
                svg,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{x:.0}</text>"#,
                sx(*x),
                H - MB + 16.0
            )
            .unwrap();
        }
    }
    write!(
        svg,
        r##"<text x="{}" y="{MT}" fill="#c0392b">baseline</text><text x="{}" y="{MT}" fill="#2471a3">pipelined</text></svg>"##,
        W - 180.0,
        W - 100.0
    )
    .unwrap();
    std::fs::write(path, svg)
}
