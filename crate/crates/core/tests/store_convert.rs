//! Raw-to-converted fidelity: PNGs decode back to the exact raw batch
//! slices, millimeter depth follows the codec, and conversion is idempotent.

use simrig_core::config::{parse_run_config, validate_config, ValidatedConfig};
use simrig_core::pipeline::{collect_run, Mode};
use simrig_core::server::{serve, Endpoint};
use simrig_core::store::convert_outputs;
use simrig_core::store::manifest::Manifest;
use std::collections::BTreeMap;
use std::path::Path;

fn fifty_frame_config(output_dir: &Path) -> ValidatedConfig {
    let doc = format!(
        r#"{{
            "duration_s": 1.6666666666666667,
            "fps": 30,
            "num_vehicles": 3,
            "num_pedestrians": 1,
            "image_width": 40,
            "image_height": 30,
            "seed": 21,
            "output_dir": {:?},
            "sensors": [
                {{"sensor_id": "cam0", "kind": "rgb"}},
                {{"sensor_id": "depth0", "kind": "depth"}},
                {{"sensor_id": "inst0", "kind": "instance"}},
                {{"sensor_id": "lidar0", "kind": "lidar", "channels": 4, "points_per_second": 24000}},
                {{"sensor_id": "imu0", "kind": "imu"}},
                {{"sensor_id": "gnss0", "kind": "gnss"}}
            ]
        }}"#,
        output_dir.to_str().unwrap()
    );
    validate_config(&parse_run_config(&doc).unwrap()).unwrap()
}

fn run_and_convert(cfg: &ValidatedConfig) -> std::path::PathBuf {
    let sock = tempfile::tempdir().unwrap();
    let endpoint = Endpoint::Unix(sock.path().join("s.sock"));
    let server_cfg = cfg.clone();
    let ep = endpoint.clone();
    let server = std::thread::spawn(move || serve(&server_cfg, 3, &ep).unwrap());
    collect_run(cfg, &endpoint, Mode::Pipelined, 2, None).unwrap();
    server.join().unwrap();

    let episode = cfg.output_dir.join("episode_000");
    convert_outputs(&episode.join("manifest.json"), 2).unwrap();
    episode
}

fn dir_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_str().unwrap().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn converted_pngs_match_raw_slices_exactly() {
    let out = tempfile::tempdir().unwrap();
    let cfg = fifty_frame_config(out.path());
    let episode = run_and_convert(&cfg);

    let manifest = Manifest::load(&episode.join("manifest.json")).unwrap();
    assert_eq!(manifest.frames_assembled, 50);

    for sensor in manifest.sensors.iter().filter(|s| s.kind.is_camera()) {
        // 50 frames at fps 30: two batches per camera.
        assert_eq!(sensor.batches.len(), 2, "{}", sensor.sensor_id);
        let mut frames_seen = 0u64;
        for batch in &sensor.batches {
            let raw = std::fs::read(episode.join(&batch.file)).unwrap();
            for frame in batch.first_present..=batch.last_present {
                let offset =
                    ((frame - batch.first_frame) * batch.frame_size_bytes) as usize;
                let slice = &raw[offset..offset + batch.frame_size_bytes as usize];
                let png_path =
                    episode.join(format!("converted/{}/{frame:08}.png", sensor.sensor_id));
                let decoded = image::open(&png_path).unwrap().into_rgba8();
                assert_eq!(
                    decoded.as_raw().as_slice(),
                    slice,
                    "{} frame {frame} PNG differs from raw",
                    sensor.sensor_id
                );
                frames_seen += 1;
            }
        }
        assert_eq!(frames_seen, 50);
    }

    // Per-frame lidar text plus per-sensor CSVs exist.
    assert!(episode.join("converted/lidar0/00000001.xyz").exists());
    assert!(episode.join("converted/lidar0/00000050.xyz").exists());
    assert!(episode.join("converted/imu0.csv").exists());
    assert!(episode.join("converted/gnss0.csv").exists());
    assert!(episode.join("converted/actor_gt.csv").exists());
    assert!(episode.join("converted/ego_motion.csv").exists());
    let imu_csv = std::fs::read_to_string(episode.join("converted/imu0.csv")).unwrap();
    assert_eq!(imu_csv.lines().count(), 51, "header plus one row per frame");
}

#[test]
fn depth_millimeter_png_follows_the_codec() {
    let out = tempfile::tempdir().unwrap();
    let cfg = fifty_frame_config(out.path());
    let episode = run_and_convert(&cfg);

    let manifest = Manifest::load(&episode.join("manifest.json")).unwrap();
    let depth = manifest.sensors.iter().find(|s| s.sensor_id == "depth0").unwrap();
    let batch = &depth.batches[0];
    let raw = std::fs::read(episode.join(&batch.file)).unwrap();

    let mm_png = episode.join("converted/depth0_mm/00000001.png");
    let mm = image::open(&mm_png).unwrap().into_luma16();
    let code_max = (1u32 << 24) as f64 - 1.0;
    for (i, px) in mm.pixels().enumerate() {
        let code = raw[i * 4] as u32 | (raw[i * 4 + 1] as u32) << 8 | (raw[i * 4 + 2] as u32) << 16;
        let meters = 1000.0 * code as f64 / code_max;
        let expect_mm = (meters * 1000.0).round().min(u16::MAX as f64) as u16;
        assert_eq!(px.0[0], expect_mm, "pixel {i}");
    }
    // Background (1000 m = 1,000,000 mm) clamps to u16::MAX.
    assert!(mm.pixels().any(|p| p.0[0] == u16::MAX));
}

#[test]
fn conversion_is_idempotent() {
    let out = tempfile::tempdir().unwrap();
    let cfg = fifty_frame_config(out.path());
    let episode = run_and_convert(&cfg);

    let first = dir_files(&episode.join("converted"));
    convert_outputs(&episode.join("manifest.json"), 1).unwrap();
    let second = dir_files(&episode.join("converted"));
    assert_eq!(first, second);
}
