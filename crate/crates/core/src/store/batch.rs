//! Memory-mapped batch files for fixed-size image frames.
//!
//! Each batch holds one second of frames: the file is pre-sized to exactly
//! `fps · batch_duration · width · height · channels` bytes and frame
//! `frame_id` lives at offset `(frame_id - first) · frame_size` where `first`
//! is the first frame id of the batch. A finished batch is flushed to disk
//! and journaled before the writer moves on, so an interrupted run loses at
//! most the open batch.

use crate::config::{SensorSpec, BATCH_DURATION_S};
use crate::store::{io_err, StoreError};
use memmap2::MmapMut;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Manifest entry for one finished batch file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub batch_index: u64,
    /// Path relative to the episode root.
    pub file: String,
    /// First frame id the batch can hold (`batch_index · capacity + 1`).
    pub first_frame: u64,
    /// First and last frame actually written.
    pub first_present: u64,
    pub last_present: u64,
    pub present_frames: u64,
    pub capacity_frames: u64,
    pub frame_size_bytes: u64,
}

struct OpenBatch {
    index: u64,
    file: File,
    map: MmapMut,
    path: PathBuf,
    first_present: u64,
    last_present: u64,
    present: u64,
}

pub struct BatchWriter {
    sensor_id: String,
    dir: PathBuf,
    rel_dir: String,
    frame_size: u64,
    capacity: u64,
    current: Option<OpenBatch>,
    finished: Vec<BatchEntry>,
    last_frame: u64,
}

impl BatchWriter {
    /// Open a writer under `<episode_root>/raw/<sensor_id>/`. The sensor must
    /// be an image kind; batch sizing follows its geometry and the run fps.
    pub fn open(episode_root: &Path, spec: &SensorSpec, fps: u32) -> Result<Self, StoreError> {
        let frame_size = spec
            .frame_size_bytes()
            .ok_or_else(|| StoreError::NotAnImageSensor(spec.sensor_id.clone()))?;
        let rel_dir = format!("raw/{}", spec.sensor_id);
        let dir = episode_root.join(&rel_dir);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(BatchWriter {
            sensor_id: spec.sensor_id.clone(),
            dir,
            rel_dir,
            frame_size,
            capacity: fps as u64 * BATCH_DURATION_S as u64,
            current: None,
            finished: Vec::new(),
            last_frame: 0,
        })
    }

    pub fn frame_size_bytes(&self) -> u64 {
        self.frame_size
    }

    pub fn capacity_frames(&self) -> u64 {
        self.capacity
    }

    fn open_batch(&self, index: u64) -> Result<OpenBatch, StoreError> {
        let path = self.dir.join(format!("batch_{index:05}.bin"));
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.set_len(self.capacity * self.frame_size).map_err(io_err(&path))?;
        let map = unsafe { MmapMut::map_mut(&file) }.map_err(io_err(&path))?;
        Ok(OpenBatch {
            index,
            file,
            map,
            path,
            first_present: 0,
            last_present: 0,
            present: 0,
        })
    }

    fn finish_batch(&mut self, batch: OpenBatch) -> Result<(), StoreError> {
        if batch.present == 0 {
            // Nothing written; drop the pre-sized file instead of journaling it.
            drop(batch.map);
            drop(batch.file);
            std::fs::remove_file(&batch.path).map_err(io_err(&batch.path))?;
            return Ok(());
        }
        batch.map.flush().map_err(io_err(&batch.path))?;
        let entry = BatchEntry {
            batch_index: batch.index,
            file: format!("{}/batch_{:05}.bin", self.rel_dir, batch.index),
            first_frame: batch.index * self.capacity + 1,
            first_present: batch.first_present,
            last_present: batch.last_present,
            present_frames: batch.present,
            capacity_frames: self.capacity,
            frame_size_bytes: self.frame_size,
        };
        // Journal the flushed batch so a crash later in the run cannot lose it.
        let journal = self.dir.join("batches.jsonl");
        let mut jf = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&journal)
            .map_err(io_err(&journal))?;
        let line = serde_json::to_string(&entry).expect("batch entry serializes");
        writeln!(jf, "{line}").map_err(io_err(&journal))?;
        jf.sync_data().map_err(io_err(&journal))?;
        self.finished.push(entry);
        Ok(())
    }

    /// Write one frame's raw bytes. Frames must arrive in increasing id order;
    /// crossing a batch boundary flushes and journals the finished batch first.
    pub fn append_frame(&mut self, frame_id: u64, raw: &[u8]) -> Result<(), StoreError> {
        if raw.len() as u64 != self.frame_size {
            return Err(StoreError::SizeMismatch {
                sensor_id: self.sensor_id.clone(),
                expected: self.frame_size,
                got: raw.len() as u64,
            });
        }
        if frame_id <= self.last_frame {
            return Err(StoreError::FrameOutOfOrder { last: self.last_frame, got: frame_id });
        }
        self.last_frame = frame_id;

        let index = (frame_id - 1) / self.capacity;
        if self.current.as_ref().map(|b| b.index) != Some(index) {
            if let Some(done) = self.current.take() {
                self.finish_batch(done)?;
            }
            self.current = Some(self.open_batch(index)?);
        }
        let batch = self.current.as_mut().expect("batch just opened");
        let offset = ((frame_id - 1) % self.capacity) * self.frame_size;
        batch.map[offset as usize..offset as usize + raw.len()].copy_from_slice(raw);
        if batch.present == 0 {
            batch.first_present = frame_id;
        }
        batch.last_present = frame_id;
        batch.present += 1;
        Ok(())
    }

    /// Flush the open batch and return every finished batch entry.
    pub fn finish(mut self) -> Result<Vec<BatchEntry>, StoreError> {
        if let Some(done) = self.current.take() {
            self.finish_batch(done)?;
        }
        Ok(self.finished)
    }
}
