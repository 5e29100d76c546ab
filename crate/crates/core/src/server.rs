//! The world server: one session per episode over a local stream socket.
//! Strictly synchronous — the server idles until a TICK_REQ, advances the
//! world exactly one frame, emits the actor snapshot and every sensor payload
//! due at that frame, then answers with TICK_RESP. Per-sensor lag delays a
//! payload's emission by a fixed number of frames; the final lagged payloads
//! flush before the SHUTDOWN ack so no frame is ever dropped.
//!
//! Sensors render sequentially into per-sensor delay queues; emission order
//! within a frame is a seed-deterministic shuffle so client demultiplexing
//! gets exercised without real GPU nondeterminism.

use crate::config::{config_digest, derive_timing, SensorKind, SensorSpec, ValidatedConfig};
use crate::hash::derive_seed;
use crate::protocol::{
    ActorRecord, ActorSnapshotMsg, Message, MessageReader, MessageWriter, PayloadKind,
    ProtocolError, SensorPayloadMsg, PROTOCOL_VERSION,
};
use crate::world::{
    render, sample_inertial, simulate_lidar, spawn_world, step_world, SpawnError, WorldState,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::io::{BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::PathBuf;
use std::time::{Duration, Instant};

/// Local socket endpoint: `unix:<path>` or `tcp:<addr>`; a bare string is a
/// unix socket path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Unix(PathBuf),
    Tcp(String),
}

impl Endpoint {
    pub fn parse(s: &str) -> Endpoint {
        if let Some(addr) = s.strip_prefix("tcp:") {
            Endpoint::Tcp(addr.to_string())
        } else if let Some(path) = s.strip_prefix("unix:") {
            Endpoint::Unix(PathBuf::from(path))
        } else {
            Endpoint::Unix(PathBuf::from(s))
        }
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Unix(p) => write!(f, "unix:{}", p.display()),
            Endpoint::Tcp(a) => write!(f, "tcp:{a}"),
        }
    }
}

/// A connected stream of either flavor.
pub enum Stream {
    Unix(UnixStream),
    Tcp(TcpStream),
}

impl Stream {
    pub fn try_clone(&self) -> std::io::Result<Stream> {
        Ok(match self {
            Stream::Unix(s) => Stream::Unix(s.try_clone()?),
            Stream::Tcp(s) => Stream::Tcp(s.try_clone()?),
        })
    }

    pub fn shutdown_both(&self) {
        match self {
            Stream::Unix(s) => {
                let _ = s.shutdown(std::net::Shutdown::Both);
            }
            Stream::Tcp(s) => {
                let _ = s.shutdown(std::net::Shutdown::Both);
            }
        }
    }
}

impl Read for Stream {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        match self {
            Stream::Unix(s) => s.read(buf),
            Stream::Tcp(s) => s.read(buf),
        }
    }
}

impl Write for Stream {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        match self {
            Stream::Unix(s) => s.write(buf),
            Stream::Tcp(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> std::io::Result<()> {
        match self {
            Stream::Unix(s) => s.flush(),
            Stream::Tcp(s) => s.flush(),
        }
    }
}

/// Connect to a serving endpoint.
pub fn connect(endpoint: &Endpoint) -> std::io::Result<Stream> {
    Ok(match endpoint {
        Endpoint::Unix(p) => Stream::Unix(UnixStream::connect(p)?),
        Endpoint::Tcp(a) => Stream::Tcp(TcpStream::connect(a)?),
    })
}

/// Connect with retries, for clients racing a freshly spawned server.
pub fn connect_retry(endpoint: &Endpoint, timeout: Duration) -> std::io::Result<Stream> {
    let start = Instant::now();
    loop {
        match connect(endpoint) {
            Ok(s) => return Ok(s),
            Err(e) if start.elapsed() >= timeout => return Err(e),
            Err(_) => std::thread::sleep(Duration::from_millis(20)),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot listen on {endpoint}: {source}")]
    Bind {
        endpoint: String,
        #[source]
        source: std::io::Error,
    },
    #[error("accept failed: {0}")]
    Accept(std::io::Error),
    #[error(transparent)]
    Spawn(#[from] SpawnError),
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ServeSummary {
    pub sessions_completed: u32,
    pub sessions_failed: u32,
    pub frames_served: u64,
    pub payload_bytes: u64,
}

/// How one session ended.
#[derive(Debug)]
pub enum SessionEnd {
    Clean { frames: u64, payload_bytes: u64 },
    Failed(String),
}

/// Serve sessions until `cfg.episodes` of them complete cleanly.
pub fn serve(cfg: &ValidatedConfig, seed: u64, endpoint: &Endpoint) -> Result<ServeSummary, ServeError> {
    enum Listener {
        Unix(UnixListener),
        Tcp(TcpListener),
    }
    let listener = match endpoint {
        Endpoint::Unix(path) => {
            if path.exists() {
                let _ = std::fs::remove_file(path);
            }
            Listener::Unix(UnixListener::bind(path).map_err(|source| ServeError::Bind {
                endpoint: endpoint.to_string(),
                source,
            })?)
        }
        Endpoint::Tcp(addr) => Listener::Tcp(TcpListener::bind(addr).map_err(|source| {
            ServeError::Bind { endpoint: endpoint.to_string(), source }
        })?),
    };

    let mut summary = ServeSummary::default();
    while summary.sessions_completed < cfg.episodes {
        let stream = match &listener {
            Listener::Unix(l) => Stream::Unix(l.accept().map_err(ServeError::Accept)?.0),
            Listener::Tcp(l) => Stream::Tcp(l.accept().map_err(ServeError::Accept)?.0),
        };
        let write_half = stream.try_clone().map_err(ServeError::Accept)?;
        match run_session(cfg, seed, stream, write_half) {
            Ok(SessionEnd::Clean { frames, payload_bytes }) => {
                summary.sessions_completed += 1;
                summary.frames_served += frames;
                summary.payload_bytes += payload_bytes;
                log::info!("session complete: {frames} frames");
            }
            Ok(SessionEnd::Failed(why)) => {
                summary.sessions_failed += 1;
                log::warn!("session failed: {why}");
            }
            Err(e) => {
                summary.sessions_failed += 1;
                log::warn!("session io error: {e}");
            }
        }
    }
    if let Endpoint::Unix(path) = endpoint {
        let _ = std::fs::remove_file(path);
    }
    Ok(summary)
}

fn snapshot_records(w: &WorldState) -> Vec<ActorRecord> {
    w.actors
        .iter()
        .map(|a| ActorRecord {
            actor_id: a.actor_id,
            class: a.class,
            pose: a.pose,
            velocity: a.world_velocity(),
            extent: a.extent,
        })
        .collect()
}

struct PendingPayload {
    frame_id: u64,
    payload: Vec<u8>,
}

/// Emit, in the frame's seeded shuffle order, every pending payload due now.
/// On the tick path a sensor's due frame is `frame - lag`; on the shutdown
/// drain the lag window has elapsed, so heads matching `frame` go out as-is.
fn emit_due_payloads<W: Write>(
    writer: &mut MessageWriter<W>,
    sensors: &[SensorSpec],
    pending: &mut [VecDeque<PendingPayload>],
    emit_seed: u64,
    frame: u64,
    apply_lag: bool,
) -> Result<u64, ProtocolError> {
    let mut order: Vec<usize> = (0..sensors.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(emit_seed.wrapping_add(frame));
    order.shuffle(&mut rng);
    let mut bytes = 0u64;
    for si in order {
        let due = if apply_lag {
            match frame.checked_sub(sensors[si].lag_frames as u64) {
                Some(d) if d >= 1 => d,
                _ => continue,
            }
        } else {
            frame
        };
        if pending[si].front().is_some_and(|p| p.frame_id == due) {
            let item = pending[si].pop_front().expect("head checked");
            bytes += item.payload.len() as u64;
            writer.write_message(&Message::SensorPayload(SensorPayloadMsg {
                sensor_id: sensors[si].sensor_id.clone(),
                frame_id: item.frame_id,
                payload_kind: PayloadKind::from_sensor_kind(sensors[si].kind),
                payload: item.payload,
            }))?;
        }
    }
    Ok(bytes)
}

fn render_sensor(
    w: &WorldState,
    prev: &WorldState,
    spec: &SensorSpec,
    fps: u32,
    frame_dt: f64,
    palette_seed: u64,
) -> Vec<u8> {
    match spec.kind {
        SensorKind::Rgb => render::render_rgb(w, spec, palette_seed),
        SensorKind::Depth => render::depth_payload(&render::render_depth(w, spec)).0,
        SensorKind::Instance => render::render_instance(w, spec),
        SensorKind::Lidar => simulate_lidar(w, spec, fps).to_le_bytes(),
        SensorKind::Imu => sample_inertial(prev, w, frame_dt).0.to_le_bytes().to_vec(),
        SensorKind::Gnss => sample_inertial(prev, w, frame_dt).1.to_le_bytes().to_vec(),
    }
}

/// Run one session on an accepted stream. Exposed at this granularity so
/// tests can drive a session over a socket pair without a listener.
pub fn run_session(
    cfg: &ValidatedConfig,
    seed: u64,
    read_half: impl Read,
    write_half: impl Write,
) -> Result<SessionEnd, ProtocolError> {
    let mut reader = MessageReader::new(read_half);
    let mut writer = MessageWriter::new(BufWriter::with_capacity(256 * 1024, write_half));

    let expected_digest = config_digest(cfg);
    let episode = match reader.read_message()? {
        Some(Message::Hello { version, config_digest: digest, episode }) => {
            if version != PROTOCOL_VERSION {
                let why = format!("protocol version {version} != {PROTOCOL_VERSION}");
                writer.write_message(&Message::Error { message: why.clone() })?;
                writer.flush()?;
                return Ok(SessionEnd::Failed(why));
            }
            if digest != expected_digest {
                let why = format!("config digest {digest:#x} != {expected_digest:#x}");
                writer.write_message(&Message::Error { message: why.clone() })?;
                writer.flush()?;
                return Ok(SessionEnd::Failed(why));
            }
            episode
        }
        Some(other) => {
            let why = format!("first message must be HELLO, got kind 0x{:02x}", other.kind());
            writer.write_message(&Message::Error { message: why.clone() })?;
            writer.flush()?;
            return Ok(SessionEnd::Failed(why));
        }
        None => return Ok(SessionEnd::Failed("client disconnected before HELLO".into())),
    };

    let plan = derive_timing(cfg);
    let world_seed = derive_seed(cfg.seed_u64() ^ seed ^ episode as u64, "world");
    let palette_seed = derive_seed(cfg.seed_u64() ^ seed, "palette");
    let emit_seed = derive_seed(cfg.seed_u64() ^ seed, "emit");
    let mut world = match spawn_world(cfg, world_seed) {
        Ok(w) => w,
        Err(e) => {
            let why = format!("spawn failed: {e}");
            writer.write_message(&Message::Error { message: why.clone() })?;
            writer.flush()?;
            return Ok(SessionEnd::Failed(why));
        }
    };

    let sensors = &cfg.sensors;
    let mut pending: Vec<VecDeque<PendingPayload>> =
        sensors.iter().map(|_| VecDeque::new()).collect();
    let mut frames = 0u64;
    let mut payload_bytes = 0u64;

    loop {
        match reader.read_message()? {
            Some(Message::TickReq) => {
                let prev = world;
                world = step_world(&prev, &plan);
                let frame = world.frame_id;
                writer.write_message(&Message::ActorSnapshot(ActorSnapshotMsg {
                    frame_id: frame,
                    actors: snapshot_records(&world),
                }))?;
                for (si, spec) in sensors.iter().enumerate() {
                    let payload = render_sensor(
                        &world,
                        &prev,
                        spec,
                        cfg.fps,
                        plan.fixed_timestep_s,
                        palette_seed,
                    );
                    pending[si].push_back(PendingPayload { frame_id: frame, payload });
                }
                payload_bytes +=
                    emit_due_payloads(&mut writer, sensors, &mut pending, emit_seed, frame, true)?;
                writer.write_message(&Message::TickResp { frame_id: frame })?;
                writer.flush()?;
                frames += 1;
            }
            Some(Message::Shutdown) => {
                // Flush every still-pending payload in frame order before the ack.
                let last = world.frame_id;
                let max_lag = sensors.iter().map(|s| s.lag_frames as u64).max().unwrap_or(0);
                for frame in (last.saturating_sub(max_lag) + 1)..=last {
                    payload_bytes += emit_due_payloads(
                        &mut writer,
                        sensors,
                        &mut pending,
                        emit_seed,
                        frame,
                        false,
                    )?;
                }
                writer.write_message(&Message::Shutdown)?;
                writer.flush()?;
                return Ok(SessionEnd::Clean { frames, payload_bytes });
            }
            Some(other) => {
                let why = format!("unexpected message kind 0x{:02x} mid-session", other.kind());
                writer.write_message(&Message::Error { message: why.clone() })?;
                writer.flush()?;
                return Ok(SessionEnd::Failed(why));
            }
            None => return Ok(SessionEnd::Failed("client disconnected mid-session".into())),
        }
    }
}
