//! End-to-end runs: an in-process server thread and the collectors talking
//! over a unix socket, checked for frame integrity, fault handling,
//! determinism, and pipelined/baseline output equivalence.

use simrig_core::config::{parse_run_config, validate_config, ValidatedConfig};
use simrig_core::pipeline::{collect_run, EpisodeReport, FaultSpec, Mode};
use simrig_core::server::{serve, Endpoint};
use simrig_core::store::manifest::{ranges_contain, Manifest};
use simrig_core::store::record_log::scan_records;
use std::collections::BTreeMap;
use std::path::Path;

fn test_config(output_dir: &Path, lags: (u32, u32, u32)) -> ValidatedConfig {
    let doc = format!(
        r#"{{
            "duration_s": 1.0,
            "fps": 30,
            "num_vehicles": 4,
            "num_pedestrians": 2,
            "image_width": 48,
            "image_height": 32,
            "max_distance_m": 50.0,
            "min_lidar_points": 1,
            "seed": 11,
            "max_substep_dt_s": 0.008333333333333333,
            "max_substeps": 8,
            "output_dir": {:?},
            "sensors": [
                {{"sensor_id": "cam_a", "kind": "rgb", "lag_frames": {}}},
                {{"sensor_id": "depth_a", "kind": "depth", "lag_frames": {}}},
                {{"sensor_id": "lidar_a", "kind": "lidar", "channels": 8,
                  "points_per_second": 48000, "lag_frames": {}}},
                {{"sensor_id": "imu_a", "kind": "imu"}},
                {{"sensor_id": "gnss_a", "kind": "gnss"}}
            ]
        }}"#,
        output_dir.to_str().unwrap(),
        lags.0,
        lags.1,
        lags.2
    );
    validate_config(&parse_run_config(&doc).unwrap()).unwrap()
}

/// Serve one session in a background thread, run one collection episode.
fn run_once(
    cfg: &ValidatedConfig,
    seed: u64,
    mode: Mode,
    fault: Option<FaultSpec>,
) -> EpisodeReport {
    let sock_dir = tempfile::tempdir().unwrap();
    let endpoint = Endpoint::Unix(sock_dir.path().join("s.sock"));
    let server_cfg = cfg.clone();
    let server_endpoint = endpoint.clone();
    let server = std::thread::spawn(move || serve(&server_cfg, seed, &server_endpoint).unwrap());
    let mut reports = collect_run(cfg, &endpoint, mode, 2, fault).unwrap();
    let summary = server.join().unwrap();
    assert_eq!(summary.sessions_completed, 1);
    reports.remove(0)
}

/// Relative path -> file bytes for everything that must be deterministic
/// (report.json carries timing and is excluded).
fn stored_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_str().unwrap().to_string();
                if rel.ends_with("report.json") {
                    continue;
                }
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn manifest_of(cfg: &ValidatedConfig) -> Manifest {
    Manifest::load(&cfg.output_dir.join("episode_000/manifest.json")).unwrap()
}

#[test]
fn lag_free_run_assembles_every_frame() {
    let out = tempfile::tempdir().unwrap();
    let cfg = test_config(out.path(), (0, 0, 0));
    let report = run_once(&cfg, 5, Mode::Pipelined, None);

    assert!(!report.aborted, "{:?}", report.abort_reason);
    assert_eq!(report.frames_requested, 30);
    assert_eq!(report.frames_assembled, 30);
    assert_eq!(report.frames_skipped, 0);
    assert!(report.counters_consistent());

    let manifest = manifest_of(&cfg);
    manifest.verify_completeness().unwrap();
    assert_eq!(manifest.assembled_ranges, vec![(1, 30)]);

    // Labels exist for every frame.
    for f in 1..=30u64 {
        assert!(out.path().join(format!("episode_000/labels/{f:08}.txt")).exists());
    }
}

#[test]
fn per_sensor_lags_shift_delivery_not_content() {
    let out = tempfile::tempdir().unwrap();
    let cfg = test_config(out.path(), (0, 2, 4));
    let report = run_once(&cfg, 5, Mode::Pipelined, None);

    assert!(!report.aborted, "{:?}", report.abort_reason);
    assert_eq!(report.frames_skipped, 0);
    assert_eq!(report.frames_assembled, 30);

    let manifest = manifest_of(&cfg);
    manifest.verify_completeness().unwrap();

    // Every sensor's stored frame ids are exactly 1..=30.
    let episode = out.path().join("episode_000");
    let lidar_scan = scan_records(&episode.join("logs/lidar_a.log")).unwrap();
    let ids: Vec<u64> = lidar_scan.records.iter().map(|(f, _)| *f).collect();
    assert_eq!(ids, (1..=30).collect::<Vec<_>>());
    for s in &manifest.sensors {
        if let Some(log) = &s.record_log {
            assert_eq!(log.records, 30, "{}", s.sensor_id);
        } else {
            let present: u64 = s.batches.iter().map(|b| b.present_frames).sum();
            assert_eq!(present, 30, "{}", s.sensor_id);
        }
    }

    // Bounded queues: never deeper than max lag + in-flight + 1.
    assert!(report.max_queue_depth <= 4 + 1 + 1, "depth {}", report.max_queue_depth);
}

#[test]
fn dropped_payload_skips_exactly_that_frame() {
    let out = tempfile::tempdir().unwrap();
    let cfg = test_config(out.path(), (0, 2, 4));
    let fault = FaultSpec { sensor_id: "depth_a".into(), frame_id: 7 };
    let report = run_once(&cfg, 5, Mode::Pipelined, Some(fault));

    assert!(!report.aborted, "{:?}", report.abort_reason);
    assert_eq!(report.frames_skipped, 1, "skips: {:?}", report.skips);
    assert_eq!(report.frames_assembled, 29);
    assert_eq!(report.skips[0].frame_id, 7);
    assert_eq!(report.skips[0].reason, "missing sensor");
    assert!(report.skips[0].sensors.contains_key("depth_a"), "{:?}", report.skips[0]);

    // No frame loss without record: every id is assembled or logged skipped.
    let manifest = manifest_of(&cfg);
    manifest.verify_completeness().unwrap();
    for f in 1..=30u64 {
        let assembled = ranges_contain(&manifest.assembled_ranges, f);
        let skipped = manifest.skips.iter().any(|s| s.frame_id == f);
        assert!(assembled ^ skipped, "frame {f}: assembled={assembled} skipped={skipped}");
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let cfg_a = test_config(out_a.path(), (0, 2, 0));
    let cfg_b = test_config(out_b.path(), (0, 2, 0));
    run_once(&cfg_a, 99, Mode::Pipelined, None);
    run_once(&cfg_b, 99, Mode::Pipelined, None);

    let a = stored_bytes(out_a.path());
    let b = stored_bytes(out_b.path());
    assert_eq!(
        a.keys().collect::<Vec<_>>(),
        b.keys().collect::<Vec<_>>(),
        "file sets differ"
    );
    for (path, bytes) in &a {
        assert_eq!(bytes, &b[path], "{path} differs between identical runs");
    }

    // A different seed changes the bytes.
    let out_c = tempfile::tempdir().unwrap();
    let cfg_c = test_config(out_c.path(), (0, 2, 0));
    run_once(&cfg_c, 100, Mode::Pipelined, None);
    let c = stored_bytes(out_c.path());
    assert_ne!(a, c);
}

#[test]
fn baseline_and_pipelined_store_identical_bytes() {
    let out_p = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let cfg_p = test_config(out_p.path(), (0, 2, 4));
    let cfg_b = test_config(out_b.path(), (0, 2, 4));
    let rp = run_once(&cfg_p, 123, Mode::Pipelined, None);
    let rb = run_once(&cfg_b, 123, Mode::Baseline, None);

    assert_eq!(rp.frames_assembled, rb.frames_assembled);
    assert_eq!(rp.frames_skipped, rb.frames_skipped);

    let p = stored_bytes(out_p.path());
    let b = stored_bytes(out_b.path());
    assert_eq!(p.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (path, bytes) in &p {
        assert_eq!(bytes, &b[path], "{path} differs between modes");
    }
}

#[test]
fn multi_episode_collection() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = test_config(out.path(), (0, 0, 0)).into_inner();
    cfg.episodes = 2;
    cfg.duration_s = 0.5;
    let cfg = validate_config(&cfg).unwrap();

    let sock_dir = tempfile::tempdir().unwrap();
    let endpoint = Endpoint::Unix(sock_dir.path().join("s.sock"));
    let server_cfg = cfg.clone();
    let server_endpoint = endpoint.clone();
    let server = std::thread::spawn(move || serve(&server_cfg, 5, &server_endpoint).unwrap());
    let reports = collect_run(&cfg, &endpoint, Mode::Pipelined, 2, None).unwrap();
    let summary = server.join().unwrap();

    assert_eq!(summary.sessions_completed, 2);
    assert_eq!(reports.len(), 2);
    let m0 = Manifest::load(&out.path().join("episode_000/manifest.json")).unwrap();
    let m1 = Manifest::load(&out.path().join("episode_001/manifest.json")).unwrap();
    assert_eq!(m0.episode, 0);
    assert_eq!(m1.episode, 1);
    // Different episodes get different worlds.
    let gt0 = std::fs::read(out.path().join("episode_000/logs/actor_gt.log")).unwrap();
    let gt1 = std::fs::read(out.path().join("episode_001/logs/actor_gt.log")).unwrap();
    assert_ne!(gt0, gt1);
}
