//! Append-only record logs for variable-size sensor data (lidar scans,
//! inertial records, ground-truth snapshots). Layout per record:
//! `[u64 frame_id][u32 length][bytes]`, recoverable by sequential scan.

use crate::store::{io_err, StoreError};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub struct RecordLogWriter {
    out: BufWriter<File>,
    path: PathBuf,
    rel_path: String,
    records: u64,
}

impl RecordLogWriter {
    /// Create `<episode_root>/logs/<name>.log`.
    pub fn open(episode_root: &Path, name: &str) -> Result<Self, StoreError> {
        let dir = episode_root.join("logs");
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let rel_path = format!("logs/{name}.log");
        let path = episode_root.join(&rel_path);
        let file = File::create(&path).map_err(io_err(&path))?;
        Ok(RecordLogWriter { out: BufWriter::new(file), path, rel_path, records: 0 })
    }

    pub fn append(&mut self, frame_id: u64, record: &[u8]) -> Result<(), StoreError> {
        self.out.write_all(&frame_id.to_le_bytes()).map_err(io_err(&self.path))?;
        self.out
            .write_all(&(record.len() as u32).to_le_bytes())
            .map_err(io_err(&self.path))?;
        self.out.write_all(record).map_err(io_err(&self.path))?;
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn rel_path(&self) -> &str {
        &self.rel_path
    }

    /// Flush buffered records to disk and return (relative path, count).
    pub fn finish(mut self) -> Result<(String, u64), StoreError> {
        self.out.flush().map_err(io_err(&self.path))?;
        self.out.get_ref().sync_data().map_err(io_err(&self.path))?;
        Ok((self.rel_path, self.records))
    }
}

/// Scan result: the intact records plus whether a truncated tail was found.
#[derive(Debug, PartialEq)]
pub struct ScanOutcome {
    pub records: Vec<(u64, Vec<u8>)>,
    /// Bytes of garbage after the last intact record, if any.
    pub truncated_tail_bytes: Option<u64>,
}

/// Sequentially recover every intact record. A short tail (interrupted write)
/// is reported, not an error; prior records stay usable.
pub fn scan_records(path: &Path) -> Result<ScanOutcome, StoreError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut pos = 0usize;
    while pos + 12 <= bytes.len() {
        let frame_id = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        let len = u32::from_le_bytes(bytes[pos + 8..pos + 12].try_into().unwrap()) as usize;
        if pos + 12 + len > bytes.len() {
            break;
        }
        records.push((frame_id, bytes[pos + 12..pos + 12 + len].to_vec()));
        pos += 12 + len;
    }
    let truncated_tail_bytes = (pos < bytes.len()).then(|| (bytes.len() - pos) as u64);
    Ok(ScanOutcome { records, truncated_tail_bytes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_log_scans_to_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let w = RecordLogWriter::open(dir.path(), "imu").unwrap();
        let (rel, n) = w.finish().unwrap();
        assert_eq!(n, 0);
        let scan = scan_records(&dir.path().join(rel)).unwrap();
        assert!(scan.records.is_empty());
        assert_eq!(scan.truncated_tail_bytes, None);
    }

    #[test]
    fn appends_scan_back_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = RecordLogWriter::open(dir.path(), "lidar0").unwrap();
        w.append(1, b"first").unwrap();
        w.append(2, b"second-record").unwrap();
        let (rel, n) = w.finish().unwrap();
        assert_eq!(n, 2);
        let scan = scan_records(&dir.path().join(rel)).unwrap();
        assert_eq!(
            scan.records,
            vec![(1, b"first".to_vec()), (2, b"second-record".to_vec())]
        );
    }

    #[test]
    fn truncated_tail_reported_prior_records_intact() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = RecordLogWriter::open(dir.path(), "gnss").unwrap();
        w.append(1, b"keep-me").unwrap();
        w.append(2, b"will-be-cut").unwrap();
        let (rel, _) = w.finish().unwrap();
        let path = dir.path().join(rel);
        let len = std::fs::metadata(&path).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 4).unwrap();

        let scan = scan_records(&path).unwrap();
        assert_eq!(scan.records, vec![(1, b"keep-me".to_vec())]);
        assert!(scan.truncated_tail_bytes.is_some());
    }
}
