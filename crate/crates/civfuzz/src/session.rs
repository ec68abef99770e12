//! Framed message exchange with an adapter over a pair of byte streams.

use std::io::{self, Read, Write};
use std::time::Duration;

use civfuzz_core::monitor::{ProtocolViolation, RunMonitor};
use civfuzz_core::sim::{Link, LinkError};
use civfuzz_core::wire::{frame_len, CodecError, Command, Event, FrameError, PROTOCOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionInfo {
    pub run_id: u64,
    pub version: u16,
    pub word_size_bits: u16,
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("adapter speaks protocol v{theirs}, monitor speaks v{ours}")]
    VersionMismatch { ours: u16, theirs: u16 },
    #[error("no Ready event within {0:?}")]
    HandshakeTimeout(Duration),
    #[error("adapter stopped responding")]
    Timeout,
    #[error("adapter word size is {theirs} bits, interface declares {ours}")]
    WordSize { ours: u16, theirs: u16 },
    #[error("expected Ready, got another event")]
    NotReady,
    #[error("frame error: {0}")]
    Frame(#[from] FrameError),
    #[error("codec error: {0}")]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Protocol(#[from] ProtocolViolation),
    #[error("session is dead")]
    Dead,
    #[error("i/o error: {0}")]
    Io(io::Error),
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

/// Reads one frame payload. Fails with `FrameError::ShortRead` when the
/// stream ends part way through.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, SessionError> {
    let mut header = [0u8; 4];
    fill(r, &mut header)?;
    let len = frame_len(header)?;
    let mut payload = vec![0u8; len];
    fill(r, &mut payload)?;
    Ok(payload)
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), SessionError> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => return Err(FrameError::ShortRead { needed: buf.len(), got }.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) if is_timeout(&e) => return Err(SessionError::Timeout),
            Err(e) => return Err(SessionError::Io(e)),
        }
    }
    Ok(())
}

/// Monitor end of a session. Any framing or codec failure marks the
/// session dead; later calls fail with [`SessionError::Dead`].
pub struct Session<R, W> {
    reader: R,
    writer: W,
    dead: bool,
}

impl<R: Read, W: Write> Session<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Session {
            reader,
            writer,
            dead: false,
        }
    }

    pub fn is_dead(&self) -> bool {
        self.dead
    }

    fn guard<T>(&mut self, r: Result<T, SessionError>) -> Result<T, SessionError> {
        if r.is_err() {
            self.dead = true;
        }
        r
    }

    pub fn recv_event(&mut self) -> Result<Event, SessionError> {
        if self.dead {
            return Err(SessionError::Dead);
        }
        let r = read_frame(&mut self.reader).and_then(|p| Ok(Event::decode_payload(&p)?));
        self.guard(r)
    }

    pub fn send_command(&mut self, cmd: &Command) -> Result<(), SessionError> {
        if self.dead {
            return Err(SessionError::Dead);
        }
        let r = self
            .writer
            .write_all(&cmd.encode())
            .and_then(|_| self.writer.flush())
            .map_err(SessionError::Io);
        self.guard(r)
    }

    /// Waits for `Ready` and checks the protocol version. `timeout` is the
    /// read timeout the caller configured on the stream.
    pub fn handshake(&mut self, timeout: Duration) -> Result<SessionInfo, SessionError> {
        let r = match self.recv_event() {
            Ok(Event::Ready {
                run_id,
                version,
                word_size_bits,
            }) if version == PROTOCOL_VERSION => Ok(SessionInfo {
                run_id,
                version,
                word_size_bits,
            }),
            Ok(Event::Ready { version, .. }) => Err(SessionError::VersionMismatch {
                ours: PROTOCOL_VERSION,
                theirs: version,
            }),
            Ok(_) => Err(SessionError::NotReady),
            Err(SessionError::Timeout) => Err(SessionError::HandshakeTimeout(timeout)),
            Err(e) => Err(e),
        };
        self.guard(r)
    }

    /// Completes the handshake and answers events until the run ends.
    pub fn serve(&mut self, monitor: &mut RunMonitor<'_>, timeout: Duration) -> Result<SessionInfo, SessionError> {
        let info = self.handshake(timeout)?;
        let ready = Event::Ready {
            run_id: info.run_id,
            version: info.version,
            word_size_bits: info.word_size_bits,
        };
        let r = monitor.handle(&ready).map_err(SessionError::from);
        self.guard(r)?;
        while !monitor.is_finished() {
            let ev = self.recv_event()?;
            let r = monitor.handle(&ev).map_err(SessionError::from);
            if let Some(cmd) = self.guard(r)? {
                self.send_command(&cmd)?;
            }
        }
        Ok(info)
    }
}

/// Adapter end of a session, used by the simulated target.
pub struct StreamLink<R, W> {
    pub reader: R,
    pub writer: W,
}

impl<R: Read, W: Write> Link for StreamLink<R, W> {
    fn send(&mut self, event: &Event) -> Result<(), LinkError> {
        self.writer
            .write_all(&event.encode())
            .and_then(|_| self.writer.flush())
            .map_err(|e| LinkError(e.to_string()))
    }

    fn recv(&mut self) -> Result<Command, LinkError> {
        let payload = read_frame(&mut self.reader).map_err(|e| LinkError(e.to_string()))?;
        Command::decode_payload(&payload).map_err(|e| LinkError(e.to_string()))
    }
}
