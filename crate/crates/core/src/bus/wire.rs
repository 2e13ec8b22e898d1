//! Framed wire protocol between clients and the broker.
//!
//! A frame is a `u32` little-endian body length, one kind byte and the
//! body. Strings and byte blocks are `u32` little-endian length prefixed.
//! `PUBLISH` and `DELIVER` may carry a trailing trace extension (relay
//! origin), and `DELIVER` always ends with the publisher name.

use std::io::{self, Read, Write};

use bytes::Bytes;

use super::envelope::Origin;

pub const HELLO: u8 = 0x01;
pub const ADVERTISE: u8 = 0x02;
pub const SUBSCRIBE: u8 = 0x03;
pub const UNSUBSCRIBE: u8 = 0x04;
pub const PUBLISH: u8 = 0x05;
pub const DELIVER: u8 = 0x06;
pub const ALIAS_SET: u8 = 0x07;
pub const ALIAS_CLEAR: u8 = 0x08;
pub const SNAPSHOT_REQ: u8 = 0x09;
pub const SNAPSHOT_RESP: u8 = 0x0A;
pub const PING: u8 = 0x0B;
pub const PONG: u8 = 0x0C;
pub const ERROR: u8 = 0x0D;
pub const ACK: u8 = 0x0E;

/// Largest body accepted from a peer.
pub const MAX_BODY: usize = 64 * 1024 * 1024;

/// Set on error codes answering a `PUBLISH`, which has no reply slot.
pub const ASYNC_ERROR_FLAG: u16 = 0x8000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Hello { node: String, pid: Option<u32> },
    Advertise { topic: String, schema: String },
    Subscribe { topic: String, schema: String },
    Unsubscribe { handle: u32 },
    Publish { handle: u32, payload: Bytes, origin: Option<Origin> },
    Deliver {
        topic: String,
        schema: String,
        seq: u64,
        timestamp: u64,
        payload: Bytes,
        publisher: String,
        origin: Option<Origin>,
    },
    AliasSet { node: String, external: String, internal: String },
    AliasClear { node: String, external: String },
    SnapshotReq,
    SnapshotResp { json: String },
    Ping,
    Pong,
    Error { code: u16, message: String },
    Ack { handle: u32, value: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("unknown frame kind {0:#04x}")]
    UnknownKind(u8),
    #[error("malformed {kind:#04x} frame: {reason}")]
    Malformed { kind: u8, reason: &'static str },
    #[error("frame body of {0} bytes exceeds limit")]
    TooLarge(usize),
}

impl Frame {
    pub fn kind(&self) -> u8 {
        match self {
            Frame::Hello { .. } => HELLO,
            Frame::Advertise { .. } => ADVERTISE,
            Frame::Subscribe { .. } => SUBSCRIBE,
            Frame::Unsubscribe { .. } => UNSUBSCRIBE,
            Frame::Publish { .. } => PUBLISH,
            Frame::Deliver { .. } => DELIVER,
            Frame::AliasSet { .. } => ALIAS_SET,
            Frame::AliasClear { .. } => ALIAS_CLEAR,
            Frame::SnapshotReq => SNAPSHOT_REQ,
            Frame::SnapshotResp { .. } => SNAPSHOT_RESP,
            Frame::Ping => PING,
            Frame::Pong => PONG,
            Frame::Error { .. } => ERROR,
            Frame::Ack { .. } => ACK,
        }
    }

    /// Complete frame bytes including the length prefix and kind.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0u8; 5];
        out[4] = self.kind();
        let body = &mut out;
        match self {
            Frame::Hello { node, pid } => {
                put_str(body, node);
                if let Some(pid) = pid {
                    body.extend_from_slice(&pid.to_le_bytes());
                }
            }
            Frame::Advertise { topic, schema } | Frame::Subscribe { topic, schema } => {
                put_str(body, topic);
                put_str(body, schema);
            }
            Frame::Unsubscribe { handle } => body.extend_from_slice(&handle.to_le_bytes()),
            Frame::Publish { handle, payload, origin } => {
                body.extend_from_slice(&handle.to_le_bytes());
                put_bytes(body, payload);
                put_origin(body, origin);
            }
            Frame::Deliver { topic, schema, seq, timestamp, payload, publisher, origin } => {
                put_str(body, topic);
                put_str(body, schema);
                body.extend_from_slice(&seq.to_le_bytes());
                body.extend_from_slice(&timestamp.to_le_bytes());
                put_bytes(body, payload);
                put_str(body, publisher);
                put_origin(body, origin);
            }
            Frame::AliasSet { node, external, internal } => {
                put_str(body, node);
                put_str(body, external);
                put_str(body, internal);
            }
            Frame::AliasClear { node, external } => {
                put_str(body, node);
                put_str(body, external);
            }
            Frame::SnapshotReq | Frame::Ping | Frame::Pong => {}
            Frame::SnapshotResp { json } => put_str(body, json),
            Frame::Error { code, message } => {
                body.extend_from_slice(&code.to_le_bytes());
                put_str(body, message);
            }
            Frame::Ack { handle, value } => {
                body.extend_from_slice(&handle.to_le_bytes());
                body.extend_from_slice(&value.to_le_bytes());
            }
        }
        let len = (out.len() - 5) as u32;
        out[..4].copy_from_slice(&len.to_le_bytes());
        out
    }

    pub fn decode(kind: u8, body: &[u8]) -> Result<Frame, WireError> {
        let mut r = BodyReader { kind, buf: body, pos: 0 };
        let frame = match kind {
            HELLO => {
                let node = r.string()?;
                let pid = if r.remaining() >= 4 { Some(r.u32()?) } else { None };
                Frame::Hello { node, pid }
            }
            ADVERTISE => Frame::Advertise { topic: r.string()?, schema: r.string()? },
            SUBSCRIBE => Frame::Subscribe { topic: r.string()?, schema: r.string()? },
            UNSUBSCRIBE => Frame::Unsubscribe { handle: r.u32()? },
            PUBLISH => Frame::Publish { handle: r.u32()?, payload: r.bytes()?, origin: r.origin()? },
            DELIVER => Frame::Deliver {
                topic: r.string()?,
                schema: r.string()?,
                seq: r.u64()?,
                timestamp: r.u64()?,
                payload: r.bytes()?,
                publisher: r.string()?,
                origin: r.origin()?,
            },
            ALIAS_SET => Frame::AliasSet { node: r.string()?, external: r.string()?, internal: r.string()? },
            ALIAS_CLEAR => Frame::AliasClear { node: r.string()?, external: r.string()? },
            SNAPSHOT_REQ => Frame::SnapshotReq,
            SNAPSHOT_RESP => Frame::SnapshotResp { json: r.string()? },
            PING => Frame::Ping,
            PONG => Frame::Pong,
            ERROR => Frame::Error { code: r.u16()?, message: r.string()? },
            ACK => Frame::Ack { handle: r.u32()?, value: r.u64()? },
            other => return Err(WireError::UnknownKind(other)),
        };
        if r.remaining() != 0 {
            return Err(WireError::Malformed { kind, reason: "trailing bytes" });
        }
        Ok(frame)
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.encode())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_bytes(out, s.as_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_origin(out: &mut Vec<u8>, origin: &Option<Origin>) {
    if let Some(o) = origin {
        out.push(1);
        put_str(out, &o.node);
        out.extend_from_slice(&o.seq.to_le_bytes());
        out.extend_from_slice(&o.timestamp.to_le_bytes());
    }
}

struct BodyReader<'a> {
    kind: u8,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BodyReader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Malformed { kind: self.kind, reason: "truncated body" });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<Bytes, WireError> {
        let len = self.u32()? as usize;
        Ok(Bytes::copy_from_slice(self.take(len)?))
    }

    fn string(&mut self) -> Result<String, WireError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| WireError::Malformed { kind: self.kind, reason: "invalid utf-8" })
    }

    fn origin(&mut self) -> Result<Option<Origin>, WireError> {
        if self.remaining() == 0 {
            return Ok(None);
        }
        match self.take(1)?[0] {
            0 => Ok(None),
            1 => Ok(Some(Origin { node: self.string()?, seq: self.u64()?, timestamp: self.u64()? })),
            _ => Err(WireError::Malformed { kind: self.kind, reason: "bad trace flag" }),
        }
    }
}

/// Incremental frame reader. Partial frames stay buffered across read
/// timeouts, so a socket with a read timeout never loses framing.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
}

/// Outcome of one `FrameReader::next` call.
#[derive(Debug)]
pub enum ReadEvent {
    Frame(Result<Frame, WireError>),
    /// The read timed out with no complete frame available.
    Idle,
    Closed,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader { inner, buf: Vec::with_capacity(4096) }
    }

    fn try_parse(&mut self) -> Option<Result<Result<Frame, WireError>, WireError>> {
        if self.buf.len() < 5 {
            return None;
        }
        let len = u32::from_le_bytes(self.buf[..4].try_into().unwrap()) as usize;
        if len > MAX_BODY {
            return Some(Err(WireError::TooLarge(len)));
        }
        if self.buf.len() < 5 + len {
            return None;
        }
        let kind = self.buf[4];
        let frame = Frame::decode(kind, &self.buf[5..5 + len]);
        self.buf.drain(..5 + len);
        Some(Ok(frame))
    }

    /// Read the next frame. An oversized length prefix is unrecoverable
    /// and reported as an `io::Error` of kind `InvalidData`.
    pub fn read_frame(&mut self) -> io::Result<ReadEvent> {
        let mut chunk = [0u8; 16 * 1024];
        loop {
            match self.try_parse() {
                Some(Ok(frame)) => return Ok(ReadEvent::Frame(frame)),
                Some(Err(e)) => return Err(io::Error::new(io::ErrorKind::InvalidData, e)),
                None => {}
            }
            match self.inner.read(&mut chunk) {
                Ok(0) => return Ok(ReadEvent::Closed),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Ok(ReadEvent::Idle)
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            }
        }
    }
}
