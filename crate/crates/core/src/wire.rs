//! Length-prefixed frames shared by clients and the relay.
//!
//! ```text
//! +----------------------+-----------+------------------+
//! | payload length (u32) | kind (u8) | payload          |
//! | big-endian           |           | <= 65536 bytes   |
//! +----------------------+-----------+------------------+
//! ```
//!
//! The header is validated before any payload buffer is allocated, so a
//! hostile length field costs the reader nothing.

use std::io::{self, Read};

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, BufReader, BufWriter};

use crate::pake::Role;

pub const HEADER_LEN: usize = 5;
pub const MAX_PAYLOAD: usize = 65536;
pub const MAX_FRAME: usize = HEADER_LEN + MAX_PAYLOAD;
pub const PROTOCOL_VERSION: u16 = 1;
pub const ROOM_ID_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte frame limit")]
    Oversize(usize),
    #[error("unknown frame kind {0:#04x}")]
    UnknownKind(u8),
    #[error("stream ended mid-frame")]
    Truncated,
    #[error("connection closed")]
    Closed,
    #[error("malformed {0} payload")]
    Malformed(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WireError {
    /// True for errors caused by the peer violating the protocol, as opposed
    /// to the transport failing.
    pub fn is_protocol(&self) -> bool {
        matches!(
            self,
            WireError::Oversize(_) | WireError::UnknownKind(_) | WireError::Malformed(_)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Join = 1,
    RoomReady = 2,
    PakeShare = 3,
    Confirm = 4,
    PeerInfo = 5,
    Manifest = 6,
    Chunk = 7,
    Fin = 8,
    Error = 9,
}

impl FrameKind {
    pub const ALL: [FrameKind; 9] = [
        FrameKind::Join,
        FrameKind::RoomReady,
        FrameKind::PakeShare,
        FrameKind::Confirm,
        FrameKind::PeerInfo,
        FrameKind::Manifest,
        FrameKind::Chunk,
        FrameKind::Fin,
        FrameKind::Error,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        match code {
            1..=9 => Ok(Self::ALL[code as usize - 1]),
            other => Err(WireError::UnknownKind(other)),
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub payload: Vec<u8>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frame")
            .field("kind", &self.kind)
            .field("len", &self.payload.len())
            .finish()
    }
}

impl Frame {
    pub fn new(kind: FrameKind, payload: Vec<u8>) -> Self {
        Self { kind, payload }
    }

    pub fn empty(kind: FrameKind) -> Self {
        Self::new(kind, Vec::new())
    }

    pub fn error(reason: &str) -> Self {
        Self::new(FrameKind::Error, reason.as_bytes().to_vec())
    }

    /// Bytes this frame occupies on the wire.
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    /// Reason text of an ERROR frame.
    pub fn error_reason(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }

    fn header(&self) -> Result<[u8; HEADER_LEN], WireError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(WireError::Oversize(self.payload.len()));
        }
        let mut h = [0u8; HEADER_LEN];
        h[..4].copy_from_slice(&(self.payload.len() as u32).to_be_bytes());
        h[4] = self.kind.code();
        Ok(h)
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, WireError> {
    let header = frame.header()?;
    let mut out = Vec::with_capacity(frame.wire_len());
    out.extend_from_slice(&header);
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

/// Validates a header, returning the kind and payload length.
pub fn parse_header(header: &[u8; HEADER_LEN]) -> Result<(FrameKind, usize), WireError> {
    let len = u32::from_be_bytes(header[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::Oversize(len));
    }
    let kind = FrameKind::from_code(header[4])?;
    Ok((kind, len))
}

/// Fills `buf`; `Ok(false)` on EOF before the first byte.
fn read_full<R: Read + ?Sized>(reader: &mut R, buf: &mut [u8]) -> Result<bool, WireError> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(WireError::Truncated),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

/// Reads one frame from a blocking byte source.
pub fn decode_frame<R: Read + ?Sized>(reader: &mut R) -> Result<Frame, WireError> {
    let mut header = [0u8; HEADER_LEN];
    if !read_full(reader, &mut header)? {
        return Err(WireError::Closed);
    }
    let (kind, len) = parse_header(&header)?;
    let mut payload = vec![0u8; len];
    if !read_full(reader, &mut payload)? && len > 0 {
        return Err(WireError::Truncated);
    }
    Ok(Frame { kind, payload })
}

/// Reads one frame from an async byte source.
///
/// Not cancel-safe: dropping the future mid-frame loses stream alignment.
pub async fn read_frame<R: AsyncRead + Unpin + ?Sized>(reader: &mut R) -> Result<Frame, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        let n = reader.read(&mut header[filled..]).await?;
        if n == 0 {
            return Err(if filled == 0 {
                WireError::Closed
            } else {
                WireError::Truncated
            });
        }
        filled += n;
    }
    let (kind, len) = parse_header(&header)?;
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload).await.map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            WireError::Truncated
        } else {
            WireError::Io(e)
        }
    })?;
    Ok(Frame { kind, payload })
}

/// Writes one frame without flushing.
pub async fn write_frame<W: AsyncWrite + Unpin + ?Sized>(
    writer: &mut W,
    frame: &Frame,
) -> Result<(), WireError> {
    let header = frame.header()?;
    writer.write_all(&header).await?;
    writer.write_all(&frame.payload).await?;
    Ok(())
}

/// First frame a client sends to the relay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JoinPayload {
    pub room_id: [u8; ROOM_ID_LEN],
    pub role: Role,
    pub protocol_version: u16,
}

impl JoinPayload {
    pub const LEN: usize = ROOM_ID_LEN + 1 + 2;

    pub fn new(room_id: [u8; ROOM_ID_LEN], role: Role) -> Self {
        Self {
            room_id,
            role,
            protocol_version: PROTOCOL_VERSION,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend_from_slice(&self.room_id);
        out.push(self.role.to_byte());
        out.extend_from_slice(&self.protocol_version.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() != Self::LEN {
            return Err(WireError::Malformed("JOIN"));
        }
        let room_id = bytes[..ROOM_ID_LEN].try_into().expect("32 bytes");
        let role = Role::from_byte(bytes[ROOM_ID_LEN]).ok_or(WireError::Malformed("JOIN"))?;
        let protocol_version = u16::from_be_bytes([bytes[ROOM_ID_LEN + 1], bytes[ROOM_ID_LEN + 2]]);
        Ok(Self {
            room_id,
            role,
            protocol_version,
        })
    }

    pub fn to_frame(&self) -> Frame {
        Frame::new(FrameKind::Join, self.encode())
    }
}

/// A buffered, framed byte stream with one frame of push-back.
pub struct FramedStream<S> {
    inner: BufReader<BufWriter<S>>,
    pending: Option<Frame>,
}

impl<S: AsyncRead + AsyncWrite + Unpin> FramedStream<S> {
    pub fn new(stream: S) -> Self {
        Self {
            inner: BufReader::with_capacity(64 * 1024, BufWriter::with_capacity(64 * 1024, stream)),
            pending: None,
        }
    }

    /// Writes and flushes one frame.
    pub async fn send(&mut self, frame: &Frame) -> Result<(), WireError> {
        self.feed(frame).await?;
        self.flush().await
    }

    /// Writes one frame into the send buffer without flushing.
    pub async fn feed(&mut self, frame: &Frame) -> Result<(), WireError> {
        write_frame(self.inner.get_mut(), frame).await
    }

    pub async fn flush(&mut self) -> Result<(), WireError> {
        self.inner.get_mut().flush().await?;
        Ok(())
    }

    pub async fn recv(&mut self) -> Result<Frame, WireError> {
        if let Some(frame) = self.pending.take() {
            return Ok(frame);
        }
        read_frame(&mut self.inner).await
    }

    /// Pushes a frame back so the next [`recv`](Self::recv) returns it.
    pub fn unread(&mut self, frame: Frame) {
        debug_assert!(self.pending.is_none());
        self.pending = Some(frame);
    }

    pub async fn shutdown(&mut self) -> Result<(), WireError> {
        self.inner.get_mut().shutdown().await?;
        Ok(())
    }

    pub fn get_ref(&self) -> &S {
        self.inner.get_ref().get_ref()
    }
}
