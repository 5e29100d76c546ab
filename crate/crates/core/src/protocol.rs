//! Length-prefixed binary protocol between the world server and collectors.
//!
//! Frame layout: `[u32 LE body length][u8 kind][body]`. The length counts the
//! body only, excluding the kind byte. Integers are little-endian, reals are
//! 64-bit IEEE-754 little-endian, strings are a u16 length plus UTF-8 bytes.

use crate::geometry::{Pose, RotationRpy, Vec3};
use crate::world::ActorClass;
use std::io::{Read, Write};

pub const PROTOCOL_VERSION: u8 = 1;

/// Bodies above this length are rejected on both ends.
pub const MAX_BODY_LEN: u64 = 1 << 31;

pub const KIND_HELLO: u8 = 0x01;
pub const KIND_TICK_REQ: u8 = 0x02;
pub const KIND_TICK_RESP: u8 = 0x03;
pub const KIND_SENSOR_PAYLOAD: u8 = 0x04;
pub const KIND_ACTOR_SNAPSHOT: u8 = 0x05;
pub const KIND_SHUTDOWN: u8 = 0x06;
pub const KIND_ERROR: u8 = 0x07;

/// Payload kind byte inside SENSOR_PAYLOAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Rgb,
    Depth,
    Instance,
    Lidar,
    Imu,
    Gnss,
}

impl PayloadKind {
    pub fn byte(self) -> u8 {
        match self {
            PayloadKind::Rgb => 1,
            PayloadKind::Depth => 2,
            PayloadKind::Instance => 3,
            PayloadKind::Lidar => 4,
            PayloadKind::Imu => 5,
            PayloadKind::Gnss => 6,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(PayloadKind::Rgb),
            2 => Some(PayloadKind::Depth),
            3 => Some(PayloadKind::Instance),
            4 => Some(PayloadKind::Lidar),
            5 => Some(PayloadKind::Imu),
            6 => Some(PayloadKind::Gnss),
            _ => None,
        }
    }

    pub fn from_sensor_kind(k: crate::config::SensorKind) -> Self {
        match k {
            crate::config::SensorKind::Rgb => PayloadKind::Rgb,
            crate::config::SensorKind::Depth => PayloadKind::Depth,
            crate::config::SensorKind::Instance => PayloadKind::Instance,
            crate::config::SensorKind::Lidar => PayloadKind::Lidar,
            crate::config::SensorKind::Imu => PayloadKind::Imu,
            crate::config::SensorKind::Gnss => PayloadKind::Gnss,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorPayloadMsg {
    pub sensor_id: String,
    pub frame_id: u64,
    pub payload_kind: PayloadKind,
    pub payload: Vec<u8>,
}

/// Ground-truth record for one actor at one frame. Velocity is world-frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorRecord {
    pub actor_id: u16,
    pub class: ActorClass,
    pub pose: Pose,
    pub velocity: Vec3,
    pub extent: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorSnapshotMsg {
    pub frame_id: u64,
    pub actors: Vec<ActorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { version: u8, config_digest: u64, episode: u32 },
    TickReq,
    TickResp { frame_id: u64 },
    SensorPayload(SensorPayloadMsg),
    ActorSnapshot(ActorSnapshotMsg),
    Shutdown,
    Error { message: String },
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Message::Hello { .. } => KIND_HELLO,
            Message::TickReq => KIND_TICK_REQ,
            Message::TickResp { .. } => KIND_TICK_RESP,
            Message::SensorPayload(_) => KIND_SENSOR_PAYLOAD,
            Message::ActorSnapshot(_) => KIND_ACTOR_SNAPSHOT,
            Message::Shutdown => KIND_SHUTDOWN,
            Message::Error { .. } => KIND_ERROR,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("unknown message kind 0x{0:02x}")]
    UnknownKind(u8),
    #[error("body length {0} exceeds {MAX_BODY_LEN}")]
    LengthOverflow(u64),
    #[error("malformed {kind} body: {detail}")]
    Malformed { kind: &'static str, detail: String },
    #[error("string too long for u16 length prefix: {0} bytes")]
    StringTooLong(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn push_str(out: &mut Vec<u8>, s: &str) -> Result<(), ProtocolError> {
    if s.len() > u16::MAX as usize {
        return Err(ProtocolError::StringTooLong(s.len()));
    }
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn push_vec3(out: &mut Vec<u8>, v: Vec3) {
    out.extend_from_slice(&v.x.to_le_bytes());
    out.extend_from_slice(&v.y.to_le_bytes());
    out.extend_from_slice(&v.z.to_le_bytes());
}

/// Encode one message into `out` (cleared first): full frame incl. prefix.
pub fn encode_message_into(m: &Message, out: &mut Vec<u8>) -> Result<(), ProtocolError> {
    out.clear();
    out.extend_from_slice(&[0, 0, 0, 0, m.kind()]);
    match m {
        Message::Hello { version, config_digest, episode } => {
            out.push(*version);
            out.extend_from_slice(&config_digest.to_le_bytes());
            out.extend_from_slice(&episode.to_le_bytes());
        }
        Message::TickReq | Message::Shutdown => {}
        Message::TickResp { frame_id } => out.extend_from_slice(&frame_id.to_le_bytes()),
        Message::SensorPayload(p) => {
            push_str(out, &p.sensor_id)?;
            out.extend_from_slice(&p.frame_id.to_le_bytes());
            out.push(p.payload_kind.byte());
            out.extend_from_slice(&p.payload);
        }
        Message::ActorSnapshot(s) => {
            out.extend_from_slice(&s.frame_id.to_le_bytes());
            out.extend_from_slice(&encode_actor_records(&s.actors));
        }
        Message::Error { message } => push_str(out, message)?,
    }
    let body_len = out.len() as u64 - 5;
    if body_len > MAX_BODY_LEN {
        return Err(ProtocolError::LengthOverflow(body_len));
    }
    out[0..4].copy_from_slice(&(body_len as u32).to_le_bytes());
    Ok(())
}

/// Encode one message as a fresh byte frame.
pub fn encode_message(m: &Message) -> Result<Vec<u8>, ProtocolError> {
    let mut out = Vec::new();
    encode_message_into(m, &mut out)?;
    Ok(out)
}

struct BodyReader<'a> {
    kind: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BodyReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.pos + n > self.buf.len() {
            return Err(ProtocolError::Malformed {
                kind: self.kind,
                detail: format!("truncated at offset {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ProtocolError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vec3(&mut self) -> Result<Vec3, ProtocolError> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    fn string(&mut self) -> Result<String, ProtocolError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| ProtocolError::Malformed {
            kind: self.kind,
            detail: format!("invalid utf-8 string: {e}"),
        })
    }

    fn finish(self) -> Result<(), ProtocolError> {
        if self.pos != self.buf.len() {
            return Err(ProtocolError::Malformed {
                kind: self.kind,
                detail: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn parse_body(kind: u8, body: &[u8]) -> Result<Message, ProtocolError> {
    match kind {
        KIND_HELLO => {
            let mut r = BodyReader { kind: "HELLO", buf: body, pos: 0 };
            let msg = Message::Hello {
                version: r.u8()?,
                config_digest: r.u64()?,
                episode: r.u32()?,
            };
            r.finish()?;
            Ok(msg)
        }
        KIND_TICK_REQ => {
            BodyReader { kind: "TICK_REQ", buf: body, pos: 0 }.finish()?;
            Ok(Message::TickReq)
        }
        KIND_TICK_RESP => {
            let mut r = BodyReader { kind: "TICK_RESP", buf: body, pos: 0 };
            let msg = Message::TickResp { frame_id: r.u64()? };
            r.finish()?;
            Ok(msg)
        }
        KIND_SENSOR_PAYLOAD => {
            let mut r = BodyReader { kind: "SENSOR_PAYLOAD", buf: body, pos: 0 };
            let sensor_id = r.string()?;
            let frame_id = r.u64()?;
            let kind_byte = r.u8()?;
            let payload_kind = PayloadKind::from_byte(kind_byte).ok_or(ProtocolError::Malformed {
                kind: "SENSOR_PAYLOAD",
                detail: format!("unknown payload kind {kind_byte}"),
            })?;
            let payload = body[r.pos..].to_vec();
            Ok(Message::SensorPayload(SensorPayloadMsg {
                sensor_id,
                frame_id,
                payload_kind,
                payload,
            }))
        }
        KIND_ACTOR_SNAPSHOT => {
            let mut r = BodyReader { kind: "ACTOR_SNAPSHOT", buf: body, pos: 0 };
            let frame_id = r.u64()?;
            let actors = decode_actor_records(&body[r.pos..])?;
            Ok(Message::ActorSnapshot(ActorSnapshotMsg { frame_id, actors }))
        }
        KIND_SHUTDOWN => {
            BodyReader { kind: "SHUTDOWN", buf: body, pos: 0 }.finish()?;
            Ok(Message::Shutdown)
        }
        KIND_ERROR => {
            let mut r = BodyReader { kind: "ERROR", buf: body, pos: 0 };
            let msg = Message::Error { message: r.string()? };
            r.finish()?;
            Ok(msg)
        }
        other => Err(ProtocolError::UnknownKind(other)),
    }
}

/// Encode a bare actor record list (the ACTOR_SNAPSHOT body without the
/// frame id). Ground-truth logs store records in this same layout.
pub fn encode_actor_records(actors: &[ActorRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + actors.len() * 99);
    out.extend_from_slice(&(actors.len() as u32).to_le_bytes());
    for a in actors {
        out.extend_from_slice(&a.actor_id.to_le_bytes());
        out.push(a.class.tag());
        push_vec3(&mut out, a.pose.location);
        out.extend_from_slice(&a.pose.rotation.roll.to_le_bytes());
        out.extend_from_slice(&a.pose.rotation.pitch.to_le_bytes());
        out.extend_from_slice(&a.pose.rotation.yaw.to_le_bytes());
        push_vec3(&mut out, a.velocity);
        push_vec3(&mut out, a.extent);
    }
    out
}

pub fn decode_actor_records(body: &[u8]) -> Result<Vec<ActorRecord>, ProtocolError> {
    let mut r = BodyReader { kind: "ACTOR_RECORDS", buf: body, pos: 0 };
    let count = r.u32()? as usize;
    let mut actors = Vec::with_capacity(count.min(65_536));
    for _ in 0..count {
        let actor_id = r.u16()?;
        let tag = r.u8()?;
        let class = ActorClass::from_tag(tag).ok_or(ProtocolError::Malformed {
            kind: "ACTOR_RECORDS",
            detail: format!("unknown class tag {tag}"),
        })?;
        let location = r.vec3()?;
        let rotation = RotationRpy::new(r.f64()?, r.f64()?, r.f64()?);
        let velocity = r.vec3()?;
        let extent = r.vec3()?;
        actors.push(ActorRecord {
            actor_id,
            class,
            pose: Pose::new(location, rotation),
            velocity,
            extent,
        });
    }
    r.finish()?;
    Ok(actors)
}

/// Result of an incremental decode attempt.
#[derive(Debug, PartialEq)]
pub enum Decoded {
    /// One complete frame was consumed from the front of the buffer.
    Complete { message: Message, consumed: usize },
    /// The buffer does not yet hold a complete frame.
    Incomplete,
}

/// Incremental decode: consumes exactly one frame when the buffer holds one.
pub fn decode_message(buf: &[u8]) -> Result<Decoded, ProtocolError> {
    if buf.len() < 5 {
        return Ok(Decoded::Incomplete);
    }
    let body_len = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as u64;
    if body_len > MAX_BODY_LEN {
        return Err(ProtocolError::LengthOverflow(body_len));
    }
    let kind = buf[4];
    let total = 5 + body_len as usize;
    if buf.len() < total {
        return Ok(Decoded::Incomplete);
    }
    let message = parse_body(kind, &buf[5..total])?;
    Ok(Decoded::Complete { message, consumed: total })
}

/// Blocking reader over a byte stream.
pub struct MessageReader<R: Read> {
    inner: R,
}

impl<R: Read> MessageReader<R> {
    pub fn new(inner: R) -> Self {
        MessageReader { inner }
    }

    /// Read exactly one message. EOF mid-frame is a truncated-stream error;
    /// EOF on a frame boundary returns `None`.
    pub fn read_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        let mut header = [0u8; 5];
        match self.inner.read_exact(&mut header[..1]) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        self.inner.read_exact(&mut header[1..])?;
        let body_len = u32::from_le_bytes(header[0..4].try_into().unwrap()) as u64;
        if body_len > MAX_BODY_LEN {
            return Err(ProtocolError::LengthOverflow(body_len));
        }
        let mut body = vec![0u8; body_len as usize];
        self.inner.read_exact(&mut body)?;
        parse_body(header[4], &body).map(Some)
    }
}

/// Writer that frames messages; callers flush at their barriers.
pub struct MessageWriter<W: Write> {
    inner: W,
    scratch: Vec<u8>,
}

impl<W: Write> MessageWriter<W> {
    pub fn new(inner: W) -> Self {
        MessageWriter { inner, scratch: Vec::new() }
    }

    pub fn write_message(&mut self, m: &Message) -> Result<(), ProtocolError> {
        let mut scratch = std::mem::take(&mut self.scratch);
        let encode_result = encode_message_into(m, &mut scratch);
        let write_result = encode_result.and_then(|()| Ok(self.inner.write_all(&scratch)?));
        self.scratch = scratch;
        write_result
    }

    pub fn flush(&mut self) -> Result<(), ProtocolError> {
        self.inner.flush()?;
        Ok(())
    }
}
