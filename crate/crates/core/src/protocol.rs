//! Length-prefixed frame protocol. Every message is a little-endian `u32`
//! byte count followed by that many bytes.
//!
//! Client messages start with the 8-byte magic, a `u16` version and a kind
//! byte. A frame adds frame id (`u64`), timestamp in ms (`u64`), width and
//! height (`u32`), channels (`u8`, must be 3), a depth flag (`u8`), the
//! interleaved RGB bytes and, when flagged, a `u16` depth plane.
//!
//! Server messages are a kind byte followed by one line of JSON.

use crate::error::{Error, Result};
use crate::pipeline::Frame;
use std::io::{Read, Write};

pub const MAGIC: &[u8; 8] = b"HCUEFRAM";
pub const VERSION: u16 = 1;
pub const SUPPORTED_VERSIONS: [u16; 1] = [VERSION];
/// Larger messages are refused (and skipped).
pub const MAX_MESSAGE: usize = 64 << 20;

const CLIENT_HEADER: usize = 8 + 2 + 1;
const FRAME_FIELDS: usize = 8 + 8 + 4 + 4 + 1 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ClientKind {
    Hello = 0,
    Frame = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ServerKind {
    Welcome = 0,
    Result = 1,
    Event = 2,
    Command = 3,
    Error = 4,
}

impl ServerKind {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => ServerKind::Welcome,
            1 => ServerKind::Result,
            2 => ServerKind::Event,
            3 => ServerKind::Command,
            4 => ServerKind::Error,
            _ => return Err(Error::Protocol(format!("unknown server message kind {b}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClientMessage {
    Hello { version: u16 },
    Frame(Frame),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServerMessage {
    pub kind: ServerKind,
    pub body: String,
}

/// Writes one length-prefixed message.
pub fn write_message(w: &mut impl Write, payload: &[u8]) -> Result<()> {
    let n = u32::try_from(payload.len()).map_err(|_| Error::Protocol("message too large".into()))?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one message; `None` on a clean end of stream before the prefix.
/// Oversized messages are consumed and reported as an error so the stream
/// stays aligned.
pub fn read_message(r: &mut impl Read) -> Result<Option<std::result::Result<Vec<u8>, Error>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_le_bytes(len) as usize;
    if n > MAX_MESSAGE {
        std::io::copy(&mut r.take(n as u64), &mut std::io::sink())?;
        return Ok(Some(Err(Error::Protocol(format!("message of {n} bytes exceeds {MAX_MESSAGE}")))));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(Some(Ok(buf)))
}

fn client_header(version: u16, kind: ClientKind) -> Vec<u8> {
    let mut b = Vec::with_capacity(CLIENT_HEADER);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&version.to_le_bytes());
    b.push(kind as u8);
    b
}

pub fn encode_hello(version: u16) -> Vec<u8> {
    client_header(version, ClientKind::Hello)
}

pub fn encode_frame(f: &Frame) -> Vec<u8> {
    let mut b = client_header(VERSION, ClientKind::Frame);
    b.reserve(FRAME_FIELDS + f.rgb.len() + f.depth.as_ref().map_or(0, |d| 2 * d.len()));
    b.extend_from_slice(&f.frame_id.to_le_bytes());
    b.extend_from_slice(&f.timestamp_ms.to_le_bytes());
    b.extend_from_slice(&(f.width as u32).to_le_bytes());
    b.extend_from_slice(&(f.height as u32).to_le_bytes());
    b.push(3);
    b.push(u8::from(f.depth.is_some()));
    b.extend_from_slice(&f.rgb);
    if let Some(d) = &f.depth {
        for v in d {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Protocol(format!("truncated {what}: need {n} bytes, have {}", buf.len())));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

pub fn decode_client(payload: &[u8]) -> Result<ClientMessage> {
    let mut buf = payload;
    let magic = take(&mut buf, 8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Protocol("bad magic".into()));
    }
    let version = u16::from_le_bytes(take(&mut buf, 2, "version")?.try_into().expect("2 bytes"));
    let kind = take(&mut buf, 1, "kind")?[0];
    if !SUPPORTED_VERSIONS.contains(&version) {
        return Err(Error::Version {
            got: version,
            supported: SUPPORTED_VERSIONS.to_vec(),
        });
    }
    match kind {
        k if k == ClientKind::Hello as u8 => {
            if !buf.is_empty() {
                return Err(Error::Protocol(format!("{} trailing bytes after hello", buf.len())));
            }
            Ok(ClientMessage::Hello { version })
        }
        k if k == ClientKind::Frame as u8 => {
            let frame_id = le_u64(take(&mut buf, 8, "frame id")?);
            let timestamp_ms = le_u64(take(&mut buf, 8, "timestamp")?);
            let width = le_u32(take(&mut buf, 4, "width")?) as usize;
            let height = le_u32(take(&mut buf, 4, "height")?) as usize;
            let channels = take(&mut buf, 1, "channels")?[0];
            let has_depth = take(&mut buf, 1, "depth flag")?[0];
            if channels != 3 {
                return Err(Error::Protocol(format!("{channels} channels; only RGB is accepted")));
            }
            if has_depth > 1 {
                return Err(Error::Protocol(format!("depth flag {has_depth}")));
            }
            let n = width
                .checked_mul(height)
                .filter(|&n| n > 0 && n <= MAX_MESSAGE)
                .ok_or_else(|| Error::Protocol(format!("bad frame size {width}x{height}")))?;
            let rgb = take(&mut buf, 3 * n, "rgb payload")?.to_vec();
            let depth = if has_depth == 1 {
                let raw = take(&mut buf, 2 * n, "depth payload")?;
                Some(raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect())
            } else {
                None
            };
            if !buf.is_empty() {
                return Err(Error::Protocol(format!("{} trailing bytes after frame", buf.len())));
            }
            Ok(ClientMessage::Frame(Frame {
                frame_id,
                timestamp_ms,
                width,
                height,
                rgb,
                depth,
            }))
        }
        k => Err(Error::Protocol(format!("unknown message kind {k}"))),
    }
}

pub fn encode_server(kind: ServerKind, body: &str) -> Vec<u8> {
    let mut b = Vec::with_capacity(1 + body.len());
    b.push(kind as u8);
    b.extend_from_slice(body.as_bytes());
    b
}

pub fn decode_server(payload: &[u8]) -> Result<ServerMessage> {
    let (&k, body) = payload
        .split_first()
        .ok_or_else(|| Error::Protocol("empty server message".into()))?;
    Ok(ServerMessage {
        kind: ServerKind::from_byte(k)?,
        body: String::from_utf8(body.to_vec()).map_err(|e| Error::Protocol(e.to_string()))?,
    })
}

/// JSON body of an error reply.
pub fn error_body(e: &Error) -> String {
    let supported = match e {
        Error::Version { supported, .. } => Some(supported.clone()),
        _ => None,
    };
    serde_json::json!({ "error": e.to_string(), "supported_versions": supported }).to_string()
}
