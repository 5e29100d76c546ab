//! The collection client. Two collectors share every processing function and
//! produce bit-identical stored bytes:
//!
//! * **pipelined** — a coordinator owns the tick loop; an ingestion worker
//!   demultiplexes payloads into per-sensor queues and runs the matcher; a
//!   pool of workers annotates bundles; one writer thread per image sensor
//!   and one records thread own the files. Hand-off is through bounded
//!   channels (ownership moves at enqueue); shutdown closes channels and
//!   drains before joining.
//! * **baseline** — every stage (receive, match, annotate, encode, write)
//!   runs inline on one thread before the next tick is sent, mirroring a
//!   single-main-loop collector.

pub mod matcher;
pub mod process;
pub mod report;
pub mod storage;

pub use matcher::{FrameBundle, MatchOutcome, MatchQueues, Mismatch};
pub use process::EpisodeContext;
pub use report::{EpisodeReport, StageClock, StageTiming};

use crate::config::{config_digest, ValidatedConfig};
use crate::protocol::{Message, MessageReader, MessageWriter, ProtocolError, PROTOCOL_VERSION};
use crate::server::{connect_retry, Endpoint, Stream};
use crate::store::batch::BatchWriter;
use crate::store::manifest::SkipRecord;
use crate::store::StoreError;
use crossbeam_channel::{bounded, Receiver, Sender};
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pipelined,
    Baseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pipelined => "pipelined",
            Mode::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "pipelined" => Some(Mode::Pipelined),
            "baseline" => Some(Mode::Baseline),
            _ => None,
        }
    }
}

/// Drop exactly one payload at ingestion: fault injection for testing the
/// skip path. Not wired to real sensor behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultSpec {
    pub sensor_id: String,
    pub frame_id: u64,
}

#[derive(Debug, Clone)]
pub struct CollectorOptions {
    pub mode: Mode,
    /// Annotation worker count for the pipelined mode; 0 = host parallelism.
    pub workers: usize,
    pub episode: u32,
    pub episode_root: PathBuf,
    pub fault: Option<FaultSpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("server rejected session: {0}")]
    Rejected(String),
    #[error("bad payload: {0}")]
    BadPayload(String),
    #[error("internal channel closed unexpectedly: {0}")]
    ChannelClosed(&'static str),
}

fn effective_workers(requested: usize) -> usize {
    if requested == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(2)
    } else {
        requested
    }
}

/// What ingestion learned by the end of the episode.
struct IngestOutcome {
    assembled: Vec<u64>,
    skips: Vec<SkipRecord>,
    stale: u64,
    max_depth: usize,
    clock: StageClock,
    abort: Option<String>,
}

enum Routed {
    Continue,
    TickResp(u64),
    ShutdownAck,
    Abort(String),
}

/// Route one server message into the queues. Shared by both modes so fault
/// injection and validation behave identically.
fn route_message(
    ctx: &EpisodeContext,
    queues: &mut MatchQueues,
    fault: &mut Option<FaultSpec>,
    msg: Option<Message>,
) -> Routed {
    match msg {
        Some(Message::SensorPayload(p)) => {
            let Some(idx) = queues.sensor_index(&p.sensor_id) else {
                return Routed::Abort(format!("payload for unknown sensor '{}'", p.sensor_id));
            };
            if let Some(expected) = ctx.expected_payload_len(idx) {
                if p.payload.len() as u64 != expected {
                    return Routed::Abort(format!(
                        "sensor {} frame {}: payload {} bytes, geometry needs {expected}",
                        p.sensor_id, p.frame_id, p.payload.len()
                    ));
                }
            }
            if fault
                .as_ref()
                .is_some_and(|f| f.sensor_id == p.sensor_id && f.frame_id == p.frame_id)
            {
                *fault = None;
                return Routed::Continue;
            }
            queues.push_payload(idx, p);
            Routed::Continue
        }
        Some(Message::ActorSnapshot(s)) => {
            queues.push_snapshot(s);
            Routed::Continue
        }
        Some(Message::TickResp { frame_id }) => Routed::TickResp(frame_id),
        Some(Message::Shutdown) => Routed::ShutdownAck,
        Some(Message::Error { message }) => Routed::Abort(format!("server error: {message}")),
        Some(other) => Routed::Abort(format!("unexpected message kind 0x{:02x}", other.kind())),
        None => Routed::Abort("connection lost".into()),
    }
}

/// Run one episode against a connected stream.
pub fn run_episode(
    cfg: &ValidatedConfig,
    stream: Stream,
    opts: &CollectorOptions,
) -> Result<EpisodeReport, PipelineError> {
    std::fs::create_dir_all(&opts.episode_root)?;
    let ctx = EpisodeContext::new(cfg, &opts.episode_root);
    if let Some(dir) = &ctx.labels_dir {
        std::fs::create_dir_all(dir)?;
    }
    match opts.mode {
        Mode::Baseline => run_baseline(&ctx, stream, opts),
        Mode::Pipelined => run_pipelined(&ctx, stream, opts),
    }
}

/// Connect per episode and collect all of them under `output_dir`.
pub fn collect_run(
    cfg: &ValidatedConfig,
    endpoint: &Endpoint,
    mode: Mode,
    workers: usize,
    fault: Option<FaultSpec>,
) -> Result<Vec<EpisodeReport>, PipelineError> {
    let mut reports = Vec::new();
    for episode in 0..cfg.episodes {
        let stream = connect_retry(endpoint, Duration::from_secs(10))?;
        let opts = CollectorOptions {
            mode,
            workers,
            episode,
            episode_root: cfg.output_dir.join(format!("episode_{episode:03}")),
            fault: fault.clone(),
        };
        reports.push(run_episode(cfg, stream, &opts)?);
    }
    Ok(reports)
}

fn hello_message(cfg: &ValidatedConfig, episode: u32) -> Message {
    Message::Hello {
        version: PROTOCOL_VERSION,
        config_digest: config_digest(cfg),
        episode,
    }
}

fn mismatch_to_skip(m: Mismatch) -> SkipRecord {
    SkipRecord { frame_id: m.frame_id, reason: m.reason, sensors: m.offenders }
}

// ---------------------------------------------------------------------------
// Baseline: one sequential context.
// ---------------------------------------------------------------------------

fn run_baseline(
    ctx: &EpisodeContext,
    stream: Stream,
    opts: &CollectorOptions,
) -> Result<EpisodeReport, PipelineError> {
    let read_half = stream.try_clone()?;
    let mut reader = MessageReader::new(read_half);
    let mut writer = MessageWriter::new(BufWriter::new(stream));

    let mut queues = MatchQueues::new(
        ctx.cfg.sensors.iter().map(|s| s.sensor_id.clone()).collect(),
    );
    let mut image_writers: Vec<(usize, BatchWriter)> = ctx
        .image_idxs
        .iter()
        .map(|&i| {
            BatchWriter::open(&ctx.episode_root, &ctx.cfg.sensors[i], ctx.cfg.fps).map(|w| (i, w))
        })
        .collect::<Result<_, _>>()?;
    let mut records = storage::RecordsWriters::open(ctx)?;

    let mut clock = StageClock::default();
    let mut assembled: Vec<u64> = Vec::new();
    let mut skips: Vec<SkipRecord> = Vec::new();
    let mut fault = opts.fault.clone();
    let mut abort: Option<String> = None;

    writer.write_message(&hello_message(&ctx.cfg, opts.episode))?;
    writer.flush()?;
    let started = Instant::now();

    let total = ctx.plan.total_frames;
    let process = |bundle: FrameBundle,
                       image_writers: &mut Vec<(usize, BatchWriter)>,
                       records: &mut storage::RecordsWriters,
                       clock: &mut StageClock|
     -> Result<(), PipelineError> {
        clock.time("write_raw", || -> Result<(), PipelineError> {
            for (idx, w) in image_writers.iter_mut() {
                w.append_frame(bundle.frame_id, &bundle.payloads[*idx])?;
            }
            Ok(())
        })?;
        clock.time("write_records", || {
            records.append_frame(ctx, bundle.frame_id, &bundle.payloads, &bundle.snapshot)
        })?;
        if let Some(labels_dir) = &ctx.labels_dir {
            let body = clock.time("annotate", || process::annotate_bundle(ctx, &bundle))?;
            if let Some(body) = body {
                clock.time("write_labels", || {
                    process::write_label_file(labels_dir, bundle.frame_id, &body)
                })?;
            }
        }
        Ok(())
    };

    let mut last_resp = 0u64;
    'ticks: for _n in 1..=total {
        writer.write_message(&Message::TickReq)?;
        writer.flush()?;
        loop {
            let msg = clock.time("receive", || reader.read_message())?;
            match route_message(ctx, &mut queues, &mut fault, msg) {
                Routed::Continue => {}
                Routed::TickResp(m) => {
                    last_resp = m;
                    break;
                }
                Routed::ShutdownAck => {
                    abort = Some("unexpected shutdown ack".into());
                    break 'ticks;
                }
                Routed::Abort(why) => {
                    abort = Some(why);
                    break 'ticks;
                }
            }
        }
        if let Some(target) = last_resp.checked_sub(ctx.max_lag).filter(|t| *t >= 1) {
            match clock.time("match", || queues.match_frame(target)) {
                MatchOutcome::Bundle(b) => {
                    assembled.push(b.frame_id);
                    process(b, &mut image_writers, &mut records, &mut clock)?;
                }
                MatchOutcome::Skip(m) => skips.push(mismatch_to_skip(m)),
            }
        }
    }

    if abort.is_none() {
        writer.write_message(&Message::Shutdown)?;
        writer.flush()?;
        loop {
            let msg = clock.time("receive", || reader.read_message())?;
            match route_message(ctx, &mut queues, &mut fault, msg) {
                Routed::Continue => {}
                Routed::ShutdownAck => break,
                Routed::TickResp(_) => {
                    abort = Some("tick response after shutdown".into());
                    break;
                }
                Routed::Abort(why) => {
                    abort = Some(why);
                    break;
                }
            }
        }
        if abort.is_none() {
            for target in (last_resp.saturating_sub(ctx.max_lag) + 1)..=last_resp {
                match clock.time("match", || queues.match_frame(target)) {
                    MatchOutcome::Bundle(b) => {
                        assembled.push(b.frame_id);
                        process(b, &mut image_writers, &mut records, &mut clock)?;
                    }
                    MatchOutcome::Skip(m) => skips.push(mismatch_to_skip(m)),
                }
            }
        }
    }

    // Close storage even on abort so flushed batches stay referenced... by
    // the journal; the manifest records whatever completed.
    let mut image_batches = Vec::new();
    for (idx, w) in image_writers {
        image_batches.push((idx, clock.time("flush", || w.finish())?));
    }
    let (sensor_logs, extra_logs) = clock.time("flush", || records.finish())?;

    let frames_requested = if abort.is_none() {
        total
    } else {
        assembled.len() as u64 + skips.len() as u64
    };
    let report = EpisodeReport {
        mode: Mode::Baseline.as_str().into(),
        episode: opts.episode,
        frames_requested,
        frames_assembled: assembled.len() as u64,
        frames_skipped: skips.len() as u64,
        skips: skips.clone(),
        stale_payloads_discarded: queues.stale_discarded,
        max_queue_depth: queues.max_depth,
        wall_time_s: 0.0,
        aborted: abort.is_some(),
        abort_reason: abort,
        stage_timing: clock.stages.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    };
    let parts = storage::ManifestParts {
        image_batches,
        sensor_logs,
        extra_logs,
        assembled,
        skips,
        frames_requested,
    };
    Ok(storage::close_episode(ctx, opts.episode, parts, report, started)?)
}

// ---------------------------------------------------------------------------
// Pipelined: coordinator + ingestion/matcher + workers + writer threads.
// ---------------------------------------------------------------------------

/// Work order for the records thread: everything appended for one frame.
struct RecordsJob {
    frame_id: u64,
    payloads: Vec<Arc<Vec<u8>>>,
    snapshot: Arc<crate::protocol::ActorSnapshotMsg>,
}

fn run_pipelined(
    ctx: &EpisodeContext,
    stream: Stream,
    opts: &CollectorOptions,
) -> Result<EpisodeReport, PipelineError> {
    let read_half = stream.try_clone()?;
    let total = ctx.plan.total_frames;
    let in_flight = ctx.cfg.in_flight_ticks.max(1) as usize;
    let workers = effective_workers(opts.workers);

    let queue_cap = (ctx.max_lag as usize + in_flight + 2).max(4);
    let (tick_done_tx, tick_done_rx) = bounded::<u64>(in_flight + 2);
    let (bundle_tx, bundle_rx) = bounded::<FrameBundle>((2 * workers).max(4));
    let (records_tx, records_rx) = bounded::<RecordsJob>(queue_cap);
    let image_channels: Vec<(Sender<(u64, Arc<Vec<u8>>)>, Receiver<(u64, Arc<Vec<u8>>)>)> =
        ctx.image_idxs.iter().map(|_| bounded(queue_cap)).collect();

    let mut started = Instant::now();
    let started_ref = &mut started;

    let scope_result: Result<
        (IngestOutcome, Vec<(usize, Vec<crate::store::batch::BatchEntry>)>, Vec<(usize, crate::store::manifest::RecordLogManifest)>, Vec<crate::store::manifest::RecordLogManifest>, StageClock, Option<String>),
        PipelineError,
    > = std::thread::scope(|s| {
        // Ingestion + matcher.
        let ingest = {
            let mut fault = opts.fault.clone();
            let image_txs: Vec<Sender<(u64, Arc<Vec<u8>>)>> =
                image_channels.iter().map(|(tx, _)| tx.clone()).collect();
            let bundle_tx = bundle_tx.clone();
            let records_tx = records_tx.clone();
            let tick_done_tx = tick_done_tx.clone();
            s.spawn(move || -> IngestOutcome {
                let mut reader = MessageReader::new(read_half);
                let mut queues = MatchQueues::new(
                    ctx.cfg.sensors.iter().map(|s| s.sensor_id.clone()).collect(),
                );
                let mut out = IngestOutcome {
                    assembled: Vec::new(),
                    skips: Vec::new(),
                    stale: 0,
                    max_depth: 0,
                    clock: StageClock::default(),
                    abort: None,
                };
                let mut last_resp = 0u64;

                let dispatch = |target: u64,
                                    queues: &mut MatchQueues,
                                    out: &mut IngestOutcome|
                 -> Result<(), PipelineError> {
                    match out.clock.time("match", || queues.match_frame(target)) {
                        MatchOutcome::Bundle(b) => {
                            out.assembled.push(b.frame_id);
                            for (ci, &idx) in ctx.image_idxs.iter().enumerate() {
                                image_txs[ci]
                                    .send((b.frame_id, b.payloads[idx].clone()))
                                    .map_err(|_| PipelineError::ChannelClosed("image writer"))?;
                            }
                            records_tx
                                .send(RecordsJob {
                                    frame_id: b.frame_id,
                                    payloads: b.payloads.clone(),
                                    snapshot: b.snapshot.clone(),
                                })
                                .map_err(|_| PipelineError::ChannelClosed("records writer"))?;
                            if ctx.labels_dir.is_some() {
                                bundle_tx
                                    .send(b)
                                    .map_err(|_| PipelineError::ChannelClosed("annotation pool"))?;
                            }
                        }
                        MatchOutcome::Skip(m) => out.skips.push(mismatch_to_skip(m)),
                    }
                    Ok(())
                };

                loop {
                    let msg = match out.clock.time("receive", || reader.read_message()) {
                        Ok(m) => m,
                        Err(e) => {
                            out.abort = Some(format!("read failed: {e}"));
                            break;
                        }
                    };
                    match route_message(ctx, &mut queues, &mut fault, msg) {
                        Routed::Continue => {}
                        Routed::TickResp(n) => {
                            last_resp = n;
                            if let Some(target) = n.checked_sub(ctx.max_lag).filter(|t| *t >= 1) {
                                if let Err(e) = dispatch(target, &mut queues, &mut out) {
                                    out.abort = Some(e.to_string());
                                    break;
                                }
                            }
                            if tick_done_tx.send(n).is_err() {
                                out.abort = Some("coordinator gone".into());
                                break;
                            }
                        }
                        Routed::ShutdownAck => {
                            for target in
                                (last_resp.saturating_sub(ctx.max_lag) + 1)..=last_resp
                            {
                                if let Err(e) = dispatch(target, &mut queues, &mut out) {
                                    out.abort = Some(e.to_string());
                                    break;
                                }
                            }
                            break;
                        }
                        Routed::Abort(why) => {
                            out.abort = Some(why);
                            break;
                        }
                    }
                }
                out.stale = queues.stale_discarded;
                out.max_depth = queues.max_depth;
                out
            })
        };
        drop(bundle_tx);
        drop(records_tx);
        drop(tick_done_tx);

        // Annotation workers.
        let mut worker_handles = Vec::new();
        if ctx.labels_dir.is_some() {
            for _ in 0..workers {
                let rx = bundle_rx.clone();
                worker_handles.push(s.spawn(move || -> Result<StageClock, PipelineError> {
                    let labels_dir = ctx.labels_dir.as_ref().expect("labels dir checked");
                    let mut clock = StageClock::default();
                    for bundle in rx.iter() {
                        clock.record("bundle_wait", bundle.assembled_at.elapsed());
                        let body = clock.time("annotate", || process::annotate_bundle(ctx, &bundle))?;
                        if let Some(body) = body {
                            clock.time("write_labels", || {
                                process::write_label_file(labels_dir, bundle.frame_id, &body)
                            })?;
                        }
                    }
                    Ok(clock)
                }));
            }
        }
        drop(bundle_rx);

        // One writer thread per image sensor.
        let mut image_handles = Vec::new();
        for (ci, &idx) in ctx.image_idxs.iter().enumerate() {
            let rx = image_channels[ci].1.clone();
            image_handles.push(s.spawn(
                move || -> Result<(usize, Vec<crate::store::batch::BatchEntry>, StageClock), PipelineError> {
                    let mut clock = StageClock::default();
                    let mut writer =
                        BatchWriter::open(&ctx.episode_root, &ctx.cfg.sensors[idx], ctx.cfg.fps)?;
                    for (frame, bytes) in rx.iter() {
                        clock.time("write_raw", || writer.append_frame(frame, &bytes))?;
                    }
                    let entries = clock.time("flush", || writer.finish())?;
                    Ok((idx, entries, clock))
                },
            ));
        }
        drop(image_channels);

        // Records thread: record logs + gt/ego, in frame order.
        let records_handle = s.spawn(
            move || -> Result<(Vec<(usize, crate::store::manifest::RecordLogManifest)>, Vec<crate::store::manifest::RecordLogManifest>, StageClock), PipelineError> {
                let mut clock = StageClock::default();
                let mut writers = storage::RecordsWriters::open(ctx)?;
                for job in records_rx.iter() {
                    clock.time("write_records", || {
                        writers.append_frame(ctx, job.frame_id, &job.payloads, &job.snapshot)
                    })?;
                }
                let (sensor_logs, extra_logs) = clock.time("flush", || writers.finish())?;
                Ok((sensor_logs, extra_logs, clock))
            },
        );

        // Coordinator: this thread owns the tick loop.
        let mut writer = MessageWriter::new(BufWriter::new(stream));
        let mut coord_abort: Option<String> = None;
        let mut coordinate = |writer: &mut MessageWriter<BufWriter<Stream>>| -> Result<(), PipelineError> {
            writer.write_message(&hello_message(&ctx.cfg, opts.episode))?;
            writer.flush()?;
            *started_ref = Instant::now();
            let mut outstanding = 0usize;
            for _ in 0..total {
                if outstanding >= in_flight {
                    tick_done_rx
                        .recv()
                        .map_err(|_| PipelineError::ChannelClosed("tick responses"))?;
                    outstanding -= 1;
                }
                writer.write_message(&Message::TickReq)?;
                writer.flush()?;
                outstanding += 1;
            }
            writer.write_message(&Message::Shutdown)?;
            writer.flush()?;
            Ok(())
        };
        if let Err(e) = coordinate(&mut writer) {
            coord_abort = Some(e.to_string());
        }
        // Drain acknowledgements until ingestion closes its side.
        while tick_done_rx.recv().is_ok() {}

        let ingest_out = ingest.join().expect("ingestion thread");
        let mut merged_clock = StageClock::default();
        for h in worker_handles {
            let c = h.join().expect("annotation worker")?;
            merged_clock.merge(&c);
        }
        let mut image_batches = Vec::new();
        for h in image_handles {
            let (idx, entries, c) = h.join().expect("image writer thread")?;
            merged_clock.merge(&c);
            image_batches.push((idx, entries));
        }
        let (sensor_logs, extra_logs, rc) = records_handle.join().expect("records thread")?;
        merged_clock.merge(&rc);
        image_batches.sort_by_key(|(idx, _)| *idx);

        Ok((ingest_out, image_batches, sensor_logs, extra_logs, merged_clock, coord_abort))
    });

    let (mut ingest_out, image_batches, sensor_logs, extra_logs, merged_clock, coord_abort) =
        scope_result?;
    if ingest_out.abort.is_none() {
        ingest_out.abort = coord_abort;
    }
    ingest_out.clock.merge(&merged_clock);

    let frames_requested = if ingest_out.abort.is_none() {
        total
    } else {
        ingest_out.assembled.len() as u64 + ingest_out.skips.len() as u64
    };
    let report = EpisodeReport {
        mode: Mode::Pipelined.as_str().into(),
        episode: opts.episode,
        frames_requested,
        frames_assembled: ingest_out.assembled.len() as u64,
        frames_skipped: ingest_out.skips.len() as u64,
        skips: ingest_out.skips.clone(),
        stale_payloads_discarded: ingest_out.stale,
        max_queue_depth: ingest_out.max_depth,
        wall_time_s: 0.0,
        aborted: ingest_out.abort.is_some(),
        abort_reason: ingest_out.abort.clone(),
        stage_timing: ingest_out
            .clock
            .stages
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    };
    let parts = storage::ManifestParts {
        image_batches,
        sensor_logs,
        extra_logs,
        assembled: ingest_out.assembled,
        skips: ingest_out.skips,
        frames_requested,
    };
    Ok(storage::close_episode(ctx, opts.episode, parts, report, started)?)
}
