//! Raw storage for a collection run: pre-sized memory-mapped batch files for
//! image frames, append-only record logs for variable-size sensors, the run
//! manifest, and the post-run conversion pass to common formats.

pub mod batch;
pub mod convert;
pub mod manifest;
pub mod record_log;

pub use batch::{BatchEntry, BatchWriter};
pub use convert::{convert_outputs, ConversionReport};
pub use manifest::{LabelsManifest, Manifest, RecordLogManifest, SensorManifest, SkipRecord};
pub use record_log::{scan_records, RecordLogWriter, ScanOutcome};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("payload size mismatch for {sensor_id}: expected {expected} bytes, got {got}")]
    SizeMismatch { sensor_id: String, expected: u64, got: u64 },
    #[error("frame ids must increase: got {got} after {last}")]
    FrameOutOfOrder { last: u64, got: u64 },
    #[error("sensor {0} is not an image sensor; batch files hold fixed-size image frames")]
    NotAnImageSensor(String),
    #[error("manifest problem: {0}")]
    Manifest(String),
    #[error("missing file referenced by manifest: {0}")]
    MissingFile(PathBuf),
    #[error("file length mismatch for {path}: manifest says {expected}, file has {got}")]
    LengthMismatch { path: PathBuf, expected: u64, got: u64 },
    #[error("image encode: {0}")]
    Image(String),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> StoreError {
    let path = path.into();
    move |source| StoreError::Io { path, source }
}
