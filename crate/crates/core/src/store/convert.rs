//! Post-run conversion of raw batches and logs to common formats: RGBA PNG
//! per image frame (plus a 16-bit millimeter PNG for depth), ASCII XYZ per
//! lidar frame, and CSV for the inertial and ground-truth logs. Conversion is
//! a separate pass over the finished files, parallel across files, with
//! deterministic naming, so re-running it reproduces identical bytes.

use crate::config::SensorKind;
use crate::store::manifest::{Manifest, RecordLogManifest};
use crate::store::record_log::scan_records;
use crate::store::{io_err, StoreError};
use crate::world::{GnssReading, ImuReading, LidarScan, BACKGROUND_DEPTH_M};
use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgba};
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const DEPTH_CODE_MAX: f64 = (1u32 << 24) as f64 - 1.0;

#[derive(Debug, Default, Clone, PartialEq, Serialize)]
pub struct ConversionReport {
    pub image_frames: u64,
    pub depth_mm_frames: u64,
    pub lidar_frames: u64,
    pub csv_files: u64,
    /// Depth pixels whose millimeter value exceeded u16 and was clamped.
    pub clamped_depth_pixels: u64,
}

impl ConversionReport {
    fn merge(mut self, o: ConversionReport) -> ConversionReport {
        self.image_frames += o.image_frames;
        self.depth_mm_frames += o.depth_mm_frames;
        self.lidar_frames += o.lidar_frames;
        self.csv_files += o.csv_files;
        self.clamped_depth_pixels += o.clamped_depth_pixels;
        self
    }
}

enum Task {
    ImageBatch {
        sensor_id: String,
        kind: SensorKind,
        width: u32,
        height: u32,
        file: PathBuf,
        frame_size: u64,
        first_frame: u64,
        frames: Vec<u64>,
    },
    LidarLog { sensor_id: String, file: PathBuf },
    ImuCsv { sensor_id: String, file: PathBuf },
    GnssCsv { sensor_id: String, file: PathBuf },
    ActorGtCsv { name: String, file: PathBuf },
    EgoMotionCsv { name: String, file: PathBuf },
}

fn frame_png_path(dir: &Path, frame_id: u64) -> PathBuf {
    dir.join(format!("{frame_id:08}.png"))
}

fn write_png(path: &Path, img: DynamicImage) -> Result<(), StoreError> {
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| StoreError::Image(e.to_string()))?;
    std::fs::write(path, bytes.into_inner()).map_err(io_err(path))?;
    Ok(())
}

fn convert_image_batch(
    out_root: &Path,
    sensor_id: &str,
    kind: SensorKind,
    width: u32,
    height: u32,
    file: &Path,
    frame_size: u64,
    frames: &[u64],
    capacity_first: u64,
) -> Result<ConversionReport, StoreError> {
    let bytes = std::fs::read(file).map_err(io_err(file))?;
    let dir = out_root.join(sensor_id);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mm_dir = out_root.join(format!("{sensor_id}_mm"));
    if kind == SensorKind::Depth {
        std::fs::create_dir_all(&mm_dir).map_err(io_err(&mm_dir))?;
    }

    let mut report = ConversionReport::default();
    for &frame in frames {
        let offset = ((frame - capacity_first) * frame_size) as usize;
        let slice = &bytes[offset..offset + frame_size as usize];
        let rgba = ImageBuffer::<Rgba<u8>, _>::from_raw(width, height, slice.to_vec())
            .ok_or_else(|| StoreError::Image("raw slice does not fit geometry".into()))?;
        write_png(&frame_png_path(&dir, frame), DynamicImage::ImageRgba8(rgba))?;
        report.image_frames += 1;

        if kind == SensorKind::Depth {
            let mut mm = ImageBuffer::<Luma<u16>, Vec<u16>>::new(width, height);
            for (i, px) in mm.pixels_mut().enumerate() {
                let code = slice[i * 4] as u32
                    | (slice[i * 4 + 1] as u32) << 8
                    | (slice[i * 4 + 2] as u32) << 16;
                let meters = BACKGROUND_DEPTH_M * code as f64 / DEPTH_CODE_MAX;
                let millimeters = (meters * 1000.0).round();
                if millimeters > u16::MAX as f64 {
                    report.clamped_depth_pixels += 1;
                    px.0[0] = u16::MAX;
                } else {
                    px.0[0] = millimeters as u16;
                }
            }
            write_png(&frame_png_path(&mm_dir, frame), DynamicImage::ImageLuma16(mm))?;
            report.depth_mm_frames += 1;
        }
    }
    Ok(report)
}

fn convert_lidar_log(out_root: &Path, sensor_id: &str, file: &Path) -> Result<ConversionReport, StoreError> {
    let scan = scan_records(file)?;
    if scan.truncated_tail_bytes.is_some() {
        return Err(StoreError::Manifest(format!(
            "lidar log {} has a truncated tail; refusing to convert a clean-closed run",
            file.display()
        )));
    }
    let dir = out_root.join(sensor_id);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut report = ConversionReport::default();
    for (frame_id, record) in &scan.records {
        let points = LidarScan::from_le_bytes(record).ok_or_else(|| {
            StoreError::Manifest(format!("bad lidar record at frame {frame_id} in {}", file.display()))
        })?;
        let mut text = String::with_capacity(points.points.len() * 40);
        for p in &points.points {
            writeln!(text, "{:.6} {:.6} {:.6} {}", p.x, p.y, p.z, p.actor_id).expect("string write");
        }
        let path = dir.join(format!("{frame_id:08}.xyz"));
        std::fs::write(&path, text).map_err(io_err(&path))?;
        report.lidar_frames += 1;
    }
    Ok(report)
}

fn write_csv(path: &Path, header: &str, rows: Vec<String>) -> Result<ConversionReport, StoreError> {
    let mut text = String::with_capacity(rows.len() * 64 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(path))?;
    Ok(ConversionReport { csv_files: 1, ..Default::default() })
}

fn convert_imu_csv(out_root: &Path, sensor_id: &str, file: &Path) -> Result<ConversionReport, StoreError> {
    let scan = scan_records(file)?;
    let rows = scan
        .records
        .iter()
        .map(|(frame, rec)| {
            let r = ImuReading::from_le_bytes(rec).ok_or_else(|| {
                StoreError::Manifest(format!("bad imu record at frame {frame}"))
            })?;
            Ok(format!(
                "{frame},{},{},{},{},{},{}",
                r.accel.x, r.accel.y, r.accel.z, r.gyro.x, r.gyro.y, r.gyro.z
            ))
        })
        .collect::<Result<Vec<_>, StoreError>>()?;
    write_csv(
        &out_root.join(format!("{sensor_id}.csv")),
        "frame_id,accel_x,accel_y,accel_z,gyro_x,gyro_y,gyro_z",
        rows,
    )
}

fn convert_gnss_csv(out_root: &Path, sensor_id: &str, file: &Path) -> Result<ConversionReport, StoreError> {
    let scan = scan_records(file)?;
    let rows = scan
        .records
        .iter()
        .map(|(frame, rec)| {
            let r = GnssReading::from_le_bytes(rec).ok_or_else(|| {
                StoreError::Manifest(format!("bad gnss record at frame {frame}"))
            })?;
            Ok(format!("{frame},{},{},{}", r.lat_deg, r.lon_deg, r.alt_m))
        })
        .collect::<Result<Vec<_>, StoreError>>()?;
    write_csv(
        &out_root.join(format!("{sensor_id}.csv")),
        "frame_id,lat_deg,lon_deg,alt_m",
        rows,
    )
}

fn actor_row(frame: u64, a: &crate::protocol::ActorRecord, with_identity: bool) -> String {
    let mut row = String::new();
    write!(row, "{frame}").unwrap();
    if with_identity {
        write!(row, ",{},{}", a.actor_id, a.class.label()).unwrap();
    }
    write!(
        row,
        ",{},{},{},{},{},{},{},{},{},{},{},{}",
        a.pose.location.x,
        a.pose.location.y,
        a.pose.location.z,
        a.pose.rotation.roll,
        a.pose.rotation.pitch,
        a.pose.rotation.yaw,
        a.velocity.x,
        a.velocity.y,
        a.velocity.z,
        a.extent.x,
        a.extent.y,
        a.extent.z
    )
    .unwrap();
    row
}

fn convert_actor_gt_csv(out_root: &Path, name: &str, file: &Path) -> Result<ConversionReport, StoreError> {
    let scan = scan_records(file)?;
    let mut rows = Vec::new();
    for (frame, rec) in &scan.records {
        let actors = crate::protocol::decode_actor_records(rec)
            .map_err(|e| StoreError::Manifest(format!("bad gt record at frame {frame}: {e}")))?;
        for a in &actors {
            rows.push(actor_row(*frame, a, true));
        }
    }
    write_csv(
        &out_root.join(format!("{name}.csv")),
        "frame_id,actor_id,class,x,y,z,roll,pitch,yaw,vel_x,vel_y,vel_z,extent_x,extent_y,extent_z",
        rows,
    )
}

fn convert_ego_motion_csv(out_root: &Path, name: &str, file: &Path) -> Result<ConversionReport, StoreError> {
    let scan = scan_records(file)?;
    let mut rows = Vec::new();
    for (frame, rec) in &scan.records {
        let actors = crate::protocol::decode_actor_records(rec)
            .map_err(|e| StoreError::Manifest(format!("bad ego record at frame {frame}: {e}")))?;
        for a in &actors {
            rows.push(actor_row(*frame, a, false));
        }
    }
    write_csv(
        &out_root.join(format!("{name}.csv")),
        "frame_id,x,y,z,roll,pitch,yaw,vel_x,vel_y,vel_z,extent_x,extent_y,extent_z",
        rows,
    )
}

/// Convert every output named by the manifest into `converted/` next to it.
/// `workers = 0` uses the host's parallelism.
pub fn convert_outputs(manifest_path: &Path, workers: usize) -> Result<ConversionReport, StoreError> {
    let manifest = Manifest::load(manifest_path)?;
    manifest.verify_completeness()?;
    let root = manifest_path
        .parent()
        .ok_or_else(|| StoreError::Manifest("manifest has no parent directory".into()))?
        .to_path_buf();
    let out_root = root.join("converted");
    std::fs::create_dir_all(&out_root).map_err(io_err(&out_root))?;

    let mut tasks: Vec<Task> = Vec::new();
    for s in &manifest.sensors {
        match s.kind {
            SensorKind::Rgb | SensorKind::Depth | SensorKind::Instance => {
                for b in &s.batches {
                    let file = root.join(&b.file);
                    let meta = std::fs::metadata(&file)
                        .map_err(|_| StoreError::MissingFile(file.clone()))?;
                    let expected_len = b.capacity_frames * b.frame_size_bytes;
                    if meta.len() != expected_len {
                        return Err(StoreError::LengthMismatch {
                            path: file,
                            expected: expected_len,
                            got: meta.len(),
                        });
                    }
                    // Frames present in this batch: the globally assembled ids
                    // clipped to the batch's slot range.
                    let last_slot = b.first_frame + b.capacity_frames - 1;
                    let frames: Vec<u64> = manifest
                        .assembled_ranges
                        .iter()
                        .flat_map(|&(a, z)| a.max(b.first_frame)..=z.min(last_slot))
                        .collect();
                    if frames.len() as u64 != b.present_frames {
                        return Err(StoreError::Manifest(format!(
                            "batch {} of {}: {} frames by ranges, {} recorded",
                            b.batch_index,
                            s.sensor_id,
                            frames.len(),
                            b.present_frames
                        )));
                    }
                    tasks.push(Task::ImageBatch {
                        sensor_id: s.sensor_id.clone(),
                        kind: s.kind,
                        width: s.width,
                        height: s.height,
                        file,
                        frame_size: b.frame_size_bytes,
                        first_frame: b.first_frame,
                        frames,
                    });
                }
            }
            SensorKind::Lidar | SensorKind::Imu | SensorKind::Gnss => {
                let log: &RecordLogManifest = s.record_log.as_ref().ok_or_else(|| {
                    StoreError::Manifest(format!("sensor {} has no record log", s.sensor_id))
                })?;
                let file = root.join(&log.file);
                if !file.exists() {
                    return Err(StoreError::MissingFile(file));
                }
                tasks.push(match s.kind {
                    SensorKind::Lidar => Task::LidarLog { sensor_id: s.sensor_id.clone(), file },
                    SensorKind::Imu => Task::ImuCsv { sensor_id: s.sensor_id.clone(), file },
                    _ => Task::GnssCsv { sensor_id: s.sensor_id.clone(), file },
                });
            }
        }
    }
    for log in &manifest.record_logs {
        let file = root.join(&log.file);
        if !file.exists() {
            return Err(StoreError::MissingFile(file));
        }
        tasks.push(match log.name.as_str() {
            "ego_motion" => Task::EgoMotionCsv { name: log.name.clone(), file },
            _ => Task::ActorGtCsv { name: log.name.clone(), file },
        });
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| StoreError::Manifest(format!("worker pool: {e}")))?;
    let report = pool.install(|| {
        tasks
            .par_iter()
            .map(|task| match task {
                Task::ImageBatch {
                    sensor_id, kind, width, height, file, frame_size, first_frame, frames,
                } => convert_image_batch(
                    &out_root, sensor_id, *kind, *width, *height, file, *frame_size, frames,
                    *first_frame,
                ),
                Task::LidarLog { sensor_id, file } => convert_lidar_log(&out_root, sensor_id, file),
                Task::ImuCsv { sensor_id, file } => convert_imu_csv(&out_root, sensor_id, file),
                Task::GnssCsv { sensor_id, file } => convert_gnss_csv(&out_root, sensor_id, file),
                Task::ActorGtCsv { name, file } => convert_actor_gt_csv(&out_root, name, file),
                Task::EgoMotionCsv { name, file } => convert_ego_motion_csv(&out_root, name, file),
            })
            .try_reduce(ConversionReport::default, |a, b| Ok(a.merge(b)))
    })?;

    let report_path = out_root.join("conversion.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(io_err(&report_path))?;
    Ok(report)
}
