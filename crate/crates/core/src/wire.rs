//! Monitor/adapter wire format.
//!
//! Every message is a frame: a `u32` little-endian payload length followed
//! by the payload. All integers are little-endian. Strings are a `u16`
//! length plus UTF-8 bytes; byte blobs are a `u32` length plus the bytes.
//!
//! ```text
//! event payloads (adapter -> monitor)
//!   0x01 Ready          u64 run_id, u16 protocol_version, u16 word_size_bits
//!   0x02 CallEntry      crossing body
//!   0x03 CallExit       crossing body
//!   0x04 CallbackEntry  crossing body
//!   0x05 CallbackExit   crossing body
//!   0x06 CrashReport    u64 crossing_index, u8 access, u8 has_addr, [u64 addr],
//!                       u16 n, n * (str symbol, u32 offset, str label)
//!   0x07 WorkloadDone   u64 crossing_index
//!
//! crossing body
//!   u64 crossing_index, str symbol, str caller,
//!   u16 n, n * (locus, bytes value),
//!   u16 m, m * (u32 region_id, u64 base, bytes snapshot)
//!
//! command payloads (monitor -> adapter)
//!   0x81 Proceed
//!   0x82 Alter          u16 n, n * (locus, bytes new_value)
//!   0x83 SkipCall       bytes synthetic_return
//!   0x84 Terminate
//!
//! locus
//!   u8 0 Arg            u16 index
//!   u8 1 ReturnValue
//!   u8 2 CallbackArg    u16 index
//!   u8 3 CallbackReturn
//!   u8 4 SharedByte     u32 region_id, u32 offset
//!
//! access: 0 Read, 1 Write, 2 Exec, 3 AllocMisuse, 4 NullDeref, 5 DeadlockTimeout
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u16 = 1;

/// Frames longer than this are rejected as corrupt.
pub const MAX_FRAME_LEN: u32 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locus {
    Arg(u16),
    ReturnValue,
    CallbackArg(u16),
    CallbackReturn,
    SharedByte { region: u32, offset: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Read,
    Write,
    Exec,
    AllocMisuse,
    NullDeref,
    /// Lock acquisition that would block forever.
    DeadlockTimeout,
}

impl AccessKind {
    pub const ALL: [AccessKind; 6] = [
        AccessKind::Read,
        AccessKind::Write,
        AccessKind::Exec,
        AccessKind::AllocMisuse,
        AccessKind::NullDeref,
        AccessKind::DeadlockTimeout,
    ];

    fn tag(self) -> u8 {
        match self {
            AccessKind::Read => 0,
            AccessKind::Write => 1,
            AccessKind::Exec => 2,
            AccessKind::AllocMisuse => 3,
            AccessKind::NullDeref => 4,
            AccessKind::DeadlockTimeout => 5,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        AccessKind::ALL.get(tag as usize).copied()
    }

    /// Whether the faulty address is meaningful for arbitrariness probing.
    pub fn is_memory_access(self) -> bool {
        matches!(self, AccessKind::Read | AccessKind::Write | AccessKind::Exec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub symbol: String,
    pub offset: u32,
    /// Code label used for component attribution; empty when unknown.
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashPayload {
    pub crossing_index: u64,
    pub access: AccessKind,
    pub faulty_address: Option<u64>,
    /// Innermost frame first.
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossingKind {
    CallEntry,
    CallExit,
    CallbackEntry,
    CallbackExit,
}

impl CrossingKind {
    fn tag(self) -> u8 {
        match self {
            CrossingKind::CallEntry => 0x02,
            CrossingKind::CallExit => 0x03,
            CrossingKind::CallbackEntry => 0x04,
            CrossingKind::CallbackExit => 0x05,
        }
    }

    pub fn is_entry(self) -> bool {
        matches!(self, CrossingKind::CallEntry | CrossingKind::CallbackEntry)
    }

    pub fn is_callback(self) -> bool {
        matches!(self, CrossingKind::CallbackEntry | CrossingKind::CallbackExit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub region: u32,
    pub base: u64,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crossing {
    pub kind: CrossingKind,
    pub crossing_index: u64,
    pub symbol: String,
    /// Code label of the calling function, attributed to a component the
    /// same way as stack frames. Empty when unknown.
    pub caller: String,
    pub values: Vec<(Locus, Vec<u8>)>,
    pub snapshots: Vec<Snapshot>,
}

impl Crossing {
    pub fn value(&self, locus: Locus) -> Option<&[u8]> {
        self.values.iter().find(|(l, _)| *l == locus).map(|(_, v)| v.as_slice())
    }

    pub fn snapshot(&self, region: u32) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.region == region)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    Ready {
        run_id: u64,
        version: u16,
        word_size_bits: u16,
    },
    Crossing(Crossing),
    Crash(CrashPayload),
    WorkloadDone {
        crossing_index: u64,
    },
}

impl Event {
    /// Crossing events block the target until a command arrives.
    pub fn is_blocking(&self) -> bool {
        matches!(self, Event::Crossing(_))
    }

    pub fn crossing_index(&self) -> Option<u64> {
        match self {
            Event::Ready { .. } => None,
            Event::Crossing(c) => Some(c.crossing_index),
            Event::Crash(c) => Some(c.crossing_index),
            Event::WorkloadDone { crossing_index } => Some(*crossing_index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directive {
    pub locus: Locus,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    Proceed,
    Alter(Vec<Directive>),
    SkipCall(Vec<u8>),
    Terminate,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("unknown message tag 0x{0:02x}")]
    UnknownTag(u8),
    #[error("unknown locus tag {0}")]
    UnknownLocus(u8),
    #[error("unknown access kind {0}")]
    UnknownAccess(u8),
    #[error("payload ends early")]
    Truncated,
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("string is not valid UTF-8")]
    BadUtf8,
    #[error("empty payload")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("short read: needed {needed} bytes, got {got}")]
    ShortRead { needed: usize, got: usize },
    #[error("bad frame length {0}")]
    BadLength(u32),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn count(&mut self, n: usize) {
        self.u16(u16::try_from(n).expect("list longer than 65535 entries"));
    }
    fn str(&mut self, s: &str) {
        self.u16(u16::try_from(s.len()).expect("string longer than 65535 bytes"));
        self.0.extend_from_slice(s.as_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(u32::try_from(b.len()).expect("blob longer than 4 GiB"));
        self.0.extend_from_slice(b);
    }
    fn locus(&mut self, l: Locus) {
        match l {
            Locus::Arg(i) => {
                self.u8(0);
                self.u16(i);
            }
            Locus::ReturnValue => self.u8(1),
            Locus::CallbackArg(i) => {
                self.u8(2);
                self.u16(i);
            }
            Locus::CallbackReturn => self.u8(3),
            Locus::SharedByte { region, offset } => {
                self.u8(4);
                self.u32(region);
                self.u32(offset);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CodecError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, CodecError> {
        let n = self.u16()? as usize;
        let raw = self.take(n)?;
        core::str::from_utf8(raw)
            .map(String::from)
            .map_err(|_| CodecError::BadUtf8)
    }
    fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn locus(&mut self) -> Result<Locus, CodecError> {
        Ok(match self.u8()? {
            0 => Locus::Arg(self.u16()?),
            1 => Locus::ReturnValue,
            2 => Locus::CallbackArg(self.u16()?),
            3 => Locus::CallbackReturn,
            4 => Locus::SharedByte {
                region: self.u32()?,
                offset: self.u32()?,
            },
            t => return Err(CodecError::UnknownLocus(t)),
        })
    }
    fn finish(&self) -> Result<(), CodecError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }
}

impl Event {
    /// Encodes the payload without the length prefix.
    pub fn encode_payload(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        match self {
            Event::Ready {
                run_id,
                version,
                word_size_bits,
            } => {
                w.u8(0x01);
                w.u64(*run_id);
                w.u16(*version);
                w.u16(*word_size_bits);
            }
            Event::Crossing(c) => {
                w.u8(c.kind.tag());
                w.u64(c.crossing_index);
                w.str(&c.symbol);
                w.str(&c.caller);
                w.count(c.values.len());
                for (locus, value) in &c.values {
                    w.locus(*locus);
                    w.bytes(value);
                }
                w.count(c.snapshots.len());
                for s in &c.snapshots {
                    w.u32(s.region);
                    w.u64(s.base);
                    w.bytes(&s.bytes);
                }
            }
            Event::Crash(c) => {
                w.u8(0x06);
                w.u64(c.crossing_index);
                w.u8(c.access.tag());
                match c.faulty_address {
                    Some(a) => {
                        w.u8(1);
                        w.u64(a);
                    }
                    None => w.u8(0),
                }
                w.count(c.frames.len());
                for f in &c.frames {
                    w.str(&f.symbol);
                    w.u32(f.offset);
                    w.str(&f.label);
                }
            }
            Event::WorkloadDone { crossing_index } => {
                w.u8(0x07);
                w.u64(*crossing_index);
            }
        }
        w.0
    }

    pub fn decode_payload(payload: &[u8]) -> Result<Event, CodecError> {
        let mut r = Reader { buf: payload, pos: 0 };
        let tag = r.u8().map_err(|_| CodecError::Empty)?;
        let ev = match tag {
            0x01 => Event::Ready {
                run_id: r.u64()?,
                version: r.u16()?,
                word_size_bits: r.u16()?,
            },
            0x02..=0x05 => {
                let kind = match tag {
                    0x02 => CrossingKind::CallEntry,
                    0x03 => CrossingKind::CallExit,
                    0x04 => CrossingKind::CallbackEntry,
                    _ => CrossingKind::CallbackExit,
                };
                let crossing_index = r.u64()?;
                let symbol = r.str()?;
                let caller = r.str()?;
                let n = r.u16()?;
                let mut values = Vec::new();
                for _ in 0..n {
                    values.push((r.locus()?, r.bytes()?));
                }
                let m = r.u16()?;
                let mut snapshots = Vec::new();
                for _ in 0..m {
                    snapshots.push(Snapshot {
                        region: r.u32()?,
                        base: r.u64()?,
                        bytes: r.bytes()?,
                    });
                }
                Event::Crossing(Crossing {
                    kind,
                    crossing_index,
                    symbol,
                    caller,
                    values,
                    snapshots,
                })
            }
            0x06 => {
                let crossing_index = r.u64()?;
                let access_tag = r.u8()?;
                let access = AccessKind::from_tag(access_tag).ok_or(CodecError::UnknownAccess(access_tag))?;
                let faulty_address = match r.u8()? {
                    0 => None,
                    _ => Some(r.u64()?),
                };
                let n = r.u16()?;
                let mut frames = Vec::new();
                for _ in 0..n {
                    frames.push(Frame {
                        symbol: r.str()?,
                        offset: r.u32()?,
                        label: r.str()?,
                    });
                }
                Event::Crash(CrashPayload {
                    crossing_index,
                    access,
                    faulty_address,
                    frames,
                })
            }
            0x07 => Event::WorkloadDone {
                crossing_index: r.u64()?,
            },
            t => return Err(CodecError::UnknownTag(t)),
        };
        r.finish()?;
        Ok(ev)
    }

    pub fn encode(&self) -> Vec<u8> {
        frame(self.encode_payload())
    }
}

impl Command {
    pub fn encode_payload(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        match self {
            Command::Proceed => w.u8(0x81),
            Command::Alter(directives) => {
                w.u8(0x82);
                w.count(directives.len());
                for d in directives {
                    w.locus(d.locus);
                    w.bytes(&d.bytes);
                }
            }
            Command::SkipCall(ret) => {
                w.u8(0x83);
                w.bytes(ret);
            }
            Command::Terminate => w.u8(0x84),
        }
        w.0
    }

    pub fn decode_payload(payload: &[u8]) -> Result<Command, CodecError> {
        let mut r = Reader { buf: payload, pos: 0 };
        let cmd = match r.u8().map_err(|_| CodecError::Empty)? {
            0x81 => Command::Proceed,
            0x82 => {
                let n = r.u16()?;
                let mut directives = Vec::new();
                for _ in 0..n {
                    directives.push(Directive {
                        locus: r.locus()?,
                        bytes: r.bytes()?,
                    });
                }
                Command::Alter(directives)
            }
            0x83 => Command::SkipCall(r.bytes()?),
            0x84 => Command::Terminate,
            t => return Err(CodecError::UnknownTag(t)),
        };
        r.finish()?;
        Ok(cmd)
    }

    pub fn encode(&self) -> Vec<u8> {
        frame(self.encode_payload())
    }
}

fn frame(payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 4);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Parses a frame header and returns the payload length.
pub fn frame_len(header: [u8; 4]) -> Result<usize, FrameError> {
    let len = u32::from_le_bytes(header);
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(FrameError::BadLength(len));
    }
    Ok(len as usize)
}

/// Splits one complete frame off the front of `buf`.
pub fn split_frame(buf: &[u8]) -> Result<(&[u8], &[u8]), FrameError> {
    if buf.len() < 4 {
        return Err(FrameError::ShortRead {
            needed: 4,
            got: buf.len(),
        });
    }
    let len = frame_len([buf[0], buf[1], buf[2], buf[3]])?;
    let rest = &buf[4..];
    if rest.len() < len {
        return Err(FrameError::ShortRead {
            needed: len,
            got: rest.len(),
        });
    }
    Ok(rest.split_at(len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn ready_frame_layout() {
        let bytes = Event::Ready {
            run_id: 7,
            version: PROTOCOL_VERSION,
            word_size_bits: 64,
        }
        .encode();
        assert_eq!(&bytes[..4], &13u32.to_le_bytes());
        assert_eq!(bytes[4], 0x01);
        assert_eq!(&bytes[5..13], &7u64.to_le_bytes());
        assert_eq!(&bytes[13..15], &1u16.to_le_bytes());
        assert_eq!(&bytes[15..17], &64u16.to_le_bytes());
    }

    #[test]
    fn truncated_frame_is_short_read() {
        let bytes = Command::SkipCall(vec![1, 2, 3]).encode();
        let err = split_frame(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, FrameError::ShortRead { .. }));
    }

    #[test]
    fn unknown_tag_is_codec_error() {
        assert_eq!(Event::decode_payload(&[0x42]), Err(CodecError::UnknownTag(0x42)));
        assert_eq!(Command::decode_payload(&[0x01]), Err(CodecError::UnknownTag(0x01)));
    }

    #[test]
    fn trailing_bytes_rejected() {
        assert_eq!(Command::decode_payload(&[0x81, 0]), Err(CodecError::TrailingBytes(1)));
    }

    #[test]
    fn shared_byte_locus_layout() {
        let payload = Command::Alter(vec![Directive {
            locus: Locus::SharedByte { region: 2, offset: 17 },
            bytes: vec![0xff],
        }])
        .encode_payload();
        assert_eq!(payload, vec![0x82, 1, 0, 4, 2, 0, 0, 0, 17, 0, 0, 0, 1, 0, 0, 0, 0xff]);
    }

    #[test]
    fn zero_length_frame_rejected() {
        assert_eq!(frame_len([0; 4]), Err(FrameError::BadLength(0)));
    }
}
