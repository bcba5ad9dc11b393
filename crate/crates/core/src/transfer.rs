//! File pipeline: manifest, 16 KiB chunking, per-chunk authenticated
//! encryption, streaming send/receive and end-to-end digest verification.
//!
//! Every sealed record uses XSalsa20-Poly1305 under `Ke` with a
//! deterministic 24-byte nonce:
//!
//! ```text
//! 15 zero bytes || direction byte || index (u64, big-endian)
//! ```
//!
//! Direction bytes keep the nonce spaces of the different record types
//! disjoint, so no nonce repeats within a session.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crypto_secretbox::aead::{Aead, KeyInit};
use crypto_secretbox::{Key, Nonce, XSalsa20Poly1305};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::sync::mpsc;

use crate::pake::SessionKeys;
use crate::wire::{FramedStream, Frame, FrameKind, WireError};

pub const CHUNK_SIZE: usize = 16384;
pub const TAG_OVERHEAD: usize = 16;
pub const NONCE_LEN: usize = 24;
/// Chunks the sender may hold in memory at once.
pub const READ_AHEAD: usize = 8;
/// How long the sender waits for the receiver's receipt after FIN.
pub const RECEIPT_TIMEOUT: Duration = Duration::from_secs(60);

/// Nonce direction bytes.
pub mod direction {
    pub const CHUNK: u8 = 0x01;
    pub const MANIFEST: u8 = 0x02;
    pub const PEER_INFO_FROM_SENDER: u8 = 0x03;
    pub const PEER_INFO_FROM_RECEIVER: u8 = 0x04;
    pub const RECEIPT: u8 = 0x05;
}

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("source size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("integrity check failed at chunk {index}")]
    Integrity { index: u64 },
    #[error("chunk {got} arrived where chunk {expected} was expected (reorder or replay)")]
    Reorder { expected: u64, got: u64 },
    #[error("transfer truncated: received {received} of {expected} chunks")]
    Truncated { received: u64, expected: u64 },
    #[error("file digest does not match the manifest")]
    DigestMismatch,
    #[error("refusing to overwrite existing file {0}")]
    NameCollision(PathBuf),
    #[error("unusable file name {0:?}")]
    UnsafeName(String),
    #[error("unexpected {0:?} frame")]
    UnexpectedFrame(FrameKind),
    #[error("peer aborted the transfer: {0}")]
    PeerAborted(String),
    #[error("channel failed after {bytes_sent} bytes: {source}")]
    Channel {
        bytes_sent: u64,
        #[source]
        source: WireError,
    },
    #[error("timed out waiting for the receiver's receipt")]
    ReceiptTimeout,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TransferError {
    /// Errors that mean the data itself was rejected, as opposed to I/O or
    /// channel failure.
    pub fn is_integrity(&self) -> bool {
        matches!(
            self,
            TransferError::Integrity { .. }
                | TransferError::Reorder { .. }
                | TransferError::Truncated { .. }
                | TransferError::DigestMismatch
        )
    }

    fn channel(bytes_sent: u64, source: WireError) -> Self {
        TransferError::Channel { bytes_sent, source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    Direct,
    Relayed,
}

impl std::fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChannelMode::Direct => "direct",
            ChannelMode::Relayed => "relayed",
        })
    }
}

/// Builds the deterministic nonce for a record.
pub fn record_nonce(direction: u8, index: u64) -> [u8; NONCE_LEN] {
    let mut nonce = [0u8; NONCE_LEN];
    nonce[15] = direction;
    nonce[16..].copy_from_slice(&index.to_be_bytes());
    nonce
}

fn cipher(keys: &SessionKeys) -> XSalsa20Poly1305 {
    XSalsa20Poly1305::new(Key::from_slice(keys.ke()))
}

/// Seals an arbitrary record. The caller owns nonce-space discipline.
pub fn seal_record(keys: &SessionKeys, direction: u8, index: u64, plaintext: &[u8]) -> Vec<u8> {
    let nonce = record_nonce(direction, index);
    cipher(keys)
        .encrypt(Nonce::from_slice(&nonce), plaintext)
        .expect("XSalsa20Poly1305 encryption is infallible for in-memory buffers")
}

/// Opens a sealed record; `None` when the authenticator does not verify.
pub fn open_record(keys: &SessionKeys, direction: u8, index: u64, ciphertext: &[u8]) -> Option<Vec<u8>> {
    let nonce = record_nonce(direction, index);
    cipher(keys)
        .decrypt(Nonce::from_slice(&nonce), ciphertext)
        .ok()
}

/// One authenticated ciphertext unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedChunk {
    pub index: u64,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

impl EncryptedChunk {
    /// Wire payload: `index (u64 BE) || ciphertext`. The nonce is implied.
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.ciphertext.len());
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_payload(direction: u8, payload: &[u8]) -> Result<Self, TransferError> {
        if payload.len() < 8 + TAG_OVERHEAD {
            return Err(TransferError::Integrity {
                index: payload
                    .get(..8)
                    .map(|b| u64::from_be_bytes(b.try_into().expect("8 bytes")))
                    .unwrap_or(0),
            });
        }
        let index = u64::from_be_bytes(payload[..8].try_into().expect("8 bytes"));
        Ok(Self {
            index,
            nonce: record_nonce(direction, index),
            ciphertext: payload[8..].to_vec(),
        })
    }
}

pub fn seal_chunk(keys: &SessionKeys, index: u64, plaintext: &[u8]) -> Result<EncryptedChunk, TransferError> {
    if plaintext.len() > CHUNK_SIZE {
        return Err(TransferError::InvalidInput(format!(
            "chunk of {} bytes exceeds {CHUNK_SIZE}",
            plaintext.len()
        )));
    }
    Ok(EncryptedChunk {
        index,
        nonce: record_nonce(direction::CHUNK, index),
        ciphertext: seal_record(keys, direction::CHUNK, index, plaintext),
    })
}

/// Verifies and decrypts a chunk that must sit at `expected_index`.
pub fn open_chunk(keys: &SessionKeys, chunk: &EncryptedChunk, expected_index: u64) -> Result<Vec<u8>, TransferError> {
    if chunk.index != expected_index {
        return Err(TransferError::Reorder {
            expected: expected_index,
            got: chunk.index,
        });
    }
    if chunk.ciphertext.len() > CHUNK_SIZE + TAG_OVERHEAD {
        return Err(TransferError::Integrity { index: chunk.index });
    }
    open_record(keys, direction::CHUNK, chunk.index, &chunk.ciphertext)
        .ok_or(TransferError::Integrity { index: chunk.index })
}

pub fn chunk_count(file_size: u64) -> u64 {
    file_size.div_ceil(CHUNK_SIZE as u64)
}

/// Strips any directory part and rejects names that cannot be a plain file.
pub fn sanitize_file_name(name: &str) -> Result<String, TransferError> {
    let base = name.rsplit(['/', '\\']).next().unwrap_or("");
    let bad = base.is_empty()
        || base == "."
        || base == ".."
        || base.chars().any(|c| c == '\0' || c.is_control());
    if bad {
        return Err(TransferError::UnsafeName(name.to_string()));
    }
    Ok(base.to_string())
}

/// Transfer metadata, sent sealed before the first chunk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileManifest {
    pub file_name: String,
    pub file_size: u64,
    pub chunk_size: u32,
    pub chunk_count: u64,
    pub file_digest: [u8; 32],
}

impl FileManifest {
    pub fn new(file_name: &str, file_size: u64, file_digest: [u8; 32]) -> Result<Self, TransferError> {
        Ok(Self {
            file_name: sanitize_file_name(file_name)?,
            file_size,
            chunk_size: CHUNK_SIZE as u32,
            chunk_count: chunk_count(file_size),
            file_digest,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let name = self.file_name.as_bytes();
        let mut out = Vec::with_capacity(2 + name.len() + 8 + 4 + 8 + 32);
        out.extend_from_slice(&(name.len() as u16).to_be_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&self.file_size.to_be_bytes());
        out.extend_from_slice(&self.chunk_size.to_be_bytes());
        out.extend_from_slice(&self.chunk_count.to_be_bytes());
        out.extend_from_slice(&self.file_digest);
        out
    }

    /// Decodes and validates; the returned name is already sanitized.
    pub fn decode(bytes: &[u8]) -> Result<Self, TransferError> {
        let malformed = || TransferError::InvalidInput("malformed manifest".into());
        let name_len = u16::from_be_bytes(bytes.get(..2).ok_or_else(malformed)?.try_into().expect("2")) as usize;
        let rest = bytes.get(2..).ok_or_else(malformed)?;
        if rest.len() != name_len + 8 + 4 + 8 + 32 {
            return Err(malformed());
        }
        let name = std::str::from_utf8(&rest[..name_len]).map_err(|_| malformed())?;
        let mut at = name_len;
        let mut take = |n: usize| {
            let s = &rest[at..at + n];
            at += n;
            s
        };
        let file_size = u64::from_be_bytes(take(8).try_into().expect("8"));
        let chunk_size = u32::from_be_bytes(take(4).try_into().expect("4"));
        let chunk_count = u64::from_be_bytes(take(8).try_into().expect("8"));
        let file_digest: [u8; 32] = take(32).try_into().expect("32");
        if chunk_size as usize != CHUNK_SIZE || chunk_count != self::chunk_count(file_size) {
            return Err(malformed());
        }
        Ok(Self {
            file_name: sanitize_file_name(name)?,
            file_size,
            chunk_size,
            chunk_count,
            file_digest,
        })
    }

    /// Plaintext length expected for chunk `index`.
    pub fn chunk_len(&self, index: u64) -> usize {
        if index + 1 < self.chunk_count {
            CHUNK_SIZE
        } else {
            (self.file_size - index * CHUNK_SIZE as u64) as usize
        }
    }
}

/// Splits a source of known size into `CHUNK_SIZE` pieces.
pub struct ChunkReader<R> {
    source: R,
    size: u64,
    consumed: u64,
    next_index: u64,
    done: bool,
}

pub fn chunk_file<R: Read>(source: R, size: u64) -> ChunkReader<R> {
    ChunkReader {
        source,
        size,
        consumed: 0,
        next_index: 0,
        done: false,
    }
}

impl<R: Read> ChunkReader<R> {
    fn read_up_to(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.source.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        Ok(filled)
    }
}

impl<R: Read> Iterator for ChunkReader<R> {
    type Item = Result<(u64, Vec<u8>), TransferError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let remaining = self.size - self.consumed;
        if remaining == 0 {
            self.done = true;
            let mut probe = [0u8; 1];
            return match self.read_up_to(&mut probe) {
                Ok(0) => None,
                Ok(_) => Some(Err(TransferError::SizeMismatch {
                    expected: self.size,
                    actual: self.size + 1,
                })),
                Err(e) => Some(Err(e.into())),
            };
        }
        let want = remaining.min(CHUNK_SIZE as u64) as usize;
        let mut buf = vec![0u8; want];
        match self.read_up_to(&mut buf) {
            Ok(n) if n == want => {
                self.consumed += n as u64;
                let index = self.next_index;
                self.next_index += 1;
                Some(Ok((index, buf)))
            }
            Ok(n) => {
                self.done = true;
                Some(Err(TransferError::SizeMismatch {
                    expected: self.size,
                    actual: self.consumed + n as u64,
                }))
            }
            Err(e) => {
                self.done = true;
                Some(Err(e.into()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferReport {
    pub file_name: String,
    /// Plaintext bytes moved through the channel.
    pub bytes_sent: u64,
    #[serde(rename = "elapsed_seconds", serialize_with = "as_secs_f64")]
    pub elapsed: Duration,
    pub mode: ChannelMode,
    /// The receiver's digest matched the manifest.
    pub verified: bool,
    /// Where the receiver stored the file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn as_secs_f64<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

fn file_digest(path: &Path) -> io::Result<(u64, [u8; 32])> {
    let mut reader = BufReader::with_capacity(64 * 1024, File::open(path)?);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut total = 0u64;
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((total, hasher.finalize().into()))
}

fn sealed_frame(kind: FrameKind, keys: &SessionKeys, dir: u8, index: u64, plaintext: &[u8]) -> Frame {
    let chunk = EncryptedChunk {
        index,
        nonce: record_nonce(dir, index),
        ciphertext: seal_record(keys, dir, index, plaintext),
    };
    Frame::new(kind, chunk.to_payload())
}

/// Streams `path` over `channel`: MANIFEST, CHUNK*, FIN, then waits for the
/// receiver's sealed receipt.
pub async fn send_file<S, P>(
    channel: &mut FramedStream<S>,
    keys: &SessionKeys,
    path: &Path,
    mode: ChannelMode,
    mut progress: P,
) -> Result<TransferReport, TransferError>
where
    S: AsyncRead + AsyncWrite + Unpin,
    P: FnMut(u64, u64),
{
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| TransferError::UnsafeName(path.display().to_string()))?
        .to_string();
    let digest_path = path.to_path_buf();
    let (size, digest) = tokio::task::spawn_blocking(move || file_digest(&digest_path))
        .await
        .expect("digest task panicked")?;
    let manifest = FileManifest::new(&name, size, digest)?;
    let started = Instant::now();

    let manifest_frame = sealed_frame(FrameKind::Manifest, keys, direction::MANIFEST, 0, &manifest.encode());
    channel
        .send(&manifest_frame)
        .await
        .map_err(|e| TransferError::channel(0, e))?;

    // reader + sealer on a blocking thread; one chunk in its hands, one in
    // the writer's, the rest queued
    let (tx, mut rx) = mpsc::channel::<Result<EncryptedChunk, TransferError>>(READ_AHEAD - 2);
    let reader_keys = keys.clone();
    let reader_path = path.to_path_buf();
    let reader = tokio::task::spawn_blocking(move || {
        let file = match File::open(&reader_path) {
            Ok(f) => f,
            Err(e) => {
                let _ = tx.blocking_send(Err(e.into()));
                return;
            }
        };
        for item in chunk_file(file, size) {
            let sealed = item.and_then(|(index, plain)| seal_chunk(&reader_keys, index, &plain));
            let failed = sealed.is_err();
            if tx.blocking_send(sealed).is_err() || failed {
                return;
            }
        }
    });

    let mut bytes_sent = 0u64;
    while let Some(item) = rx.recv().await {
        let chunk = item?;
        let plain_len = (chunk.ciphertext.len() - TAG_OVERHEAD) as u64;
        let frame = Frame::new(FrameKind::Chunk, chunk.to_payload());
        channel
            .feed(&frame)
            .await
            .map_err(|e| TransferError::channel(bytes_sent, e))?;
        bytes_sent += plain_len;
        if rx.is_empty() {
            channel
                .flush()
                .await
                .map_err(|e| TransferError::channel(bytes_sent, e))?;
        }
        progress(bytes_sent, size);
    }
    reader.await.expect("reader task panicked");
    if bytes_sent != size {
        return Err(TransferError::SizeMismatch {
            expected: size,
            actual: bytes_sent,
        });
    }
    channel
        .send(&Frame::empty(FrameKind::Fin))
        .await
        .map_err(|e| TransferError::channel(bytes_sent, e))?;

    let reply = tokio::time::timeout(RECEIPT_TIMEOUT, channel.recv())
        .await
        .map_err(|_| TransferError::ReceiptTimeout)?
        .map_err(|e| TransferError::channel(bytes_sent, e))?;
    let verified = match reply.kind {
        FrameKind::Fin => {
            let receipt = EncryptedChunk::from_payload(direction::RECEIPT, &reply.payload)?;
            match open_record(keys, direction::RECEIPT, receipt.index, &receipt.ciphertext) {
                Some(d) => receipt.index == 0 && d == digest,
                None => false,
            }
        }
        FrameKind::Error => return Err(TransferError::PeerAborted(reply.error_reason())),
        other => return Err(TransferError::UnexpectedFrame(other)),
    };

    Ok(TransferReport {
        file_name: manifest.file_name,
        bytes_sent,
        elapsed: started.elapsed(),
        mode,
        verified,
        path: None,
    })
}

/// Receives one file into `out_dir`.
///
/// Data goes to a temporary file in `out_dir`, which is renamed into place
/// only after every chunk and the whole-file digest verify. On any failure
/// the temporary file is removed and an ERROR frame is sent to the peer.
pub async fn receive_file<S, P>(
    channel: &mut FramedStream<S>,
    keys: &SessionKeys,
    out_dir: &Path,
    mode: ChannelMode,
    progress: P,
) -> Result<TransferReport, TransferError>
where
    S: AsyncRead + AsyncWrite + Unpin,
    P: FnMut(u64, u64),
{
    match receive_inner(channel, keys, out_dir, mode, progress).await {
        Ok(report) => Ok(report),
        Err(err) => {
            if !matches!(err, TransferError::Channel { .. }) {
                let _ = channel.send(&Frame::error(&err.to_string())).await;
            }
            Err(err)
        }
    }
}

async fn receive_inner<S, P>(
    channel: &mut FramedStream<S>,
    keys: &SessionKeys,
    out_dir: &Path,
    mode: ChannelMode,
    mut progress: P,
) -> Result<TransferReport, TransferError>
where
    S: AsyncRead + AsyncWrite + Unpin,
    P: FnMut(u64, u64),
{
    let recv = |e| TransferError::channel(0, e);
    let first = channel.recv().await.map_err(recv)?;
    let manifest = match first.kind {
        FrameKind::Manifest => {
            let sealed = EncryptedChunk::from_payload(direction::MANIFEST, &first.payload)?;
            if sealed.index != 0 {
                return Err(TransferError::Integrity { index: sealed.index });
            }
            let plain = open_record(keys, direction::MANIFEST, 0, &sealed.ciphertext)
                .ok_or(TransferError::Integrity { index: 0 })?;
            FileManifest::decode(&plain)?
        }
        FrameKind::Error => return Err(TransferError::PeerAborted(first.error_reason())),
        other => return Err(TransferError::UnexpectedFrame(other)),
    };

    let target = out_dir.join(&manifest.file_name);
    if target.exists() {
        return Err(TransferError::NameCollision(target));
    }
    let started = Instant::now();
    let temp = tempfile::Builder::new()
        .prefix(".relaywire-")
        .suffix(".part")
        .tempfile_in(out_dir)?;
    let mut out = BufWriter::with_capacity(256 * 1024, temp.as_file());
    let mut hasher = Sha256::new();
    let mut received = 0u64;

    for expected in 0..manifest.chunk_count {
        let frame = channel.recv().await.map_err(recv)?;
        match frame.kind {
            FrameKind::Chunk => {}
            FrameKind::Fin => {
                return Err(TransferError::Truncated {
                    received: expected,
                    expected: manifest.chunk_count,
                })
            }
            FrameKind::Error => return Err(TransferError::PeerAborted(frame.error_reason())),
            other => return Err(TransferError::UnexpectedFrame(other)),
        }
        let chunk = EncryptedChunk::from_payload(direction::CHUNK, &frame.payload)?;
        let plain = open_chunk(keys, &chunk, expected)?;
        if plain.len() != manifest.chunk_len(expected) {
            return Err(TransferError::Integrity { index: expected });
        }
        hasher.update(&plain);
        out.write_all(&plain)?;
        received += plain.len() as u64;
        progress(received, manifest.file_size);
    }

    let fin = channel.recv().await.map_err(recv)?;
    match fin.kind {
        FrameKind::Fin => {}
        FrameKind::Chunk => {
            let extra = EncryptedChunk::from_payload(direction::CHUNK, &fin.payload)?;
            return Err(TransferError::Reorder {
                expected: manifest.chunk_count,
                got: extra.index,
            });
        }
        FrameKind::Error => return Err(TransferError::PeerAborted(fin.error_reason())),
        other => return Err(TransferError::UnexpectedFrame(other)),
    }
    let digest: [u8; 32] = hasher.finalize().into();
    if digest != manifest.file_digest {
        return Err(TransferError::DigestMismatch);
    }
    out.flush()?;
    drop(out);
    temp.as_file().sync_all()?;
    temp.persist_noclobber(&target).map_err(|e| {
        if e.error.kind() == io::ErrorKind::AlreadyExists {
            TransferError::NameCollision(target.clone())
        } else {
            TransferError::Io(e.error)
        }
    })?;

    let receipt = sealed_frame(FrameKind::Fin, keys, direction::RECEIPT, 0, &digest);
    // the file is in place; a lost receipt only affects the sender's report
    let _ = channel.send(&receipt).await;

    Ok(TransferReport {
        file_name: manifest.file_name,
        bytes_sent: received,
        elapsed: started.elapsed(),
        mode,
        verified: true,
        path: Some(target),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pake::SessionKeys;
    use proptest::prelude::*;
    use rand::{Rng, RngCore};
    use std::io::Cursor;

    fn keys() -> SessionKeys {
        SessionKeys::derive(b"unit-test transcript".to_vec(), b"")
    }

    #[test]
    fn chunk_boundaries() {
        let sizes = |n: usize| {
            chunk_file(Cursor::new(vec![1u8; n]), n as u64)
                .map(|c| c.unwrap().1.len())
                .collect::<Vec<_>>()
        };
        assert_eq!(sizes(16384), vec![16384]);
        assert_eq!(sizes(16385), vec![16384, 1]);
        assert!(sizes(0).is_empty());
        assert_eq!(chunk_count(0), 0);
        assert_eq!(chunk_count(1), 1);
        assert_eq!(chunk_count(16384), 1);
        assert_eq!(chunk_count(16385), 2);
    }

    #[test]
    fn chunk_indices_and_concatenation() {
        let mut data = vec![0u8; 100_000];
        rand::thread_rng().fill_bytes(&mut data);
        let chunks: Vec<_> = chunk_file(Cursor::new(data.clone()), data.len() as u64)
            .map(Result::unwrap)
            .collect();
        assert!(chunks.iter().enumerate().all(|(i, (idx, _))| *idx == i as u64));
        let joined: Vec<u8> = chunks.into_iter().flat_map(|(_, c)| c).collect();
        assert_eq!(joined, data);
    }

    #[test]
    fn source_shorter_or_longer_than_declared() {
        let short: Vec<_> = chunk_file(Cursor::new(vec![0u8; 10]), 20).collect();
        assert!(matches!(
            short.last().unwrap(),
            Err(TransferError::SizeMismatch { expected: 20, actual: 10 })
        ));
        let long: Vec<_> = chunk_file(Cursor::new(vec![0u8; 30]), 20).collect();
        assert!(matches!(
            long.last().unwrap(),
            Err(TransferError::SizeMismatch { expected: 20, .. })
        ));
    }

    #[test]
    fn nonce_layout() {
        let n = record_nonce(direction::CHUNK, 0x0102);
        assert!(n[..15].iter().all(|&b| b == 0));
        assert_eq!(n[15], 0x01);
        assert_eq!(&n[16..], &[0, 0, 0, 0, 0, 0, 1, 2]);
    }

    #[test]
    fn seal_open_and_overhead() {
        let k = keys();
        let c = seal_chunk(&k, 3, b"hello").unwrap();
        assert_eq!(c.ciphertext.len(), 5 + TAG_OVERHEAD);
        assert_eq!(open_chunk(&k, &c, 3).unwrap(), b"hello");
        let c0 = seal_chunk(&k, 0, b"same").unwrap();
        let c1 = seal_chunk(&k, 1, b"same").unwrap();
        assert_ne!(c0.ciphertext, c1.ciphertext);
        assert!(seal_chunk(&k, 0, &vec![0; CHUNK_SIZE + 1]).is_err());
    }

    #[test]
    fn tamper_and_replay() {
        let k = keys();
        let mut c = seal_chunk(&k, 6, &[9u8; 1000]).unwrap();
        let bit = rand::thread_rng().gen_range(0..c.ciphertext.len() * 8);
        c.ciphertext[bit / 8] ^= 1 << (bit % 8);
        assert!(matches!(open_chunk(&k, &c, 6), Err(TransferError::Integrity { index: 6 })));

        let five = seal_chunk(&k, 5, b"five").unwrap();
        assert!(matches!(
            open_chunk(&k, &five, 6),
            Err(TransferError::Reorder { expected: 6, got: 5 })
        ));
    }

    #[test]
    fn wrong_key_fails() {
        let c = seal_chunk(&keys(), 0, b"x").unwrap();
        let other = SessionKeys::derive(b"other".to_vec(), b"");
        assert!(open_chunk(&other, &c, 0).is_err());
    }

    #[test]
    fn sanitize_names() {
        assert_eq!(sanitize_file_name("../../etc/x").unwrap(), "x");
        assert_eq!(sanitize_file_name("C:\\Users\\a.txt").unwrap(), "a.txt");
        assert_eq!(sanitize_file_name("report.pdf").unwrap(), "report.pdf");
        for bad in ["", "..", ".", "dir/", "a\0b", "../.."] {
            assert!(sanitize_file_name(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let m = FileManifest::new("a/b/c.bin", 16385, [7; 32]).unwrap();
        assert_eq!(m.file_name, "c.bin");
        assert_eq!(m.chunk_count, 2);
        assert_eq!(m.chunk_len(0), 16384);
        assert_eq!(m.chunk_len(1), 1);
        assert_eq!(FileManifest::decode(&m.encode()).unwrap(), m);

        let mut bad = m.clone();
        bad.chunk_count = 5;
        assert!(FileManifest::decode(&bad.encode()).is_err());
        assert!(FileManifest::decode(&m.encode()[..10]).is_err());
        let empty = FileManifest::new("e", 0, [0; 32]).unwrap();
        assert_eq!(empty.chunk_count, 0);
    }

    proptest! {
        #[test]
        fn seal_open_round_trip(index in any::<u64>(), data in prop::collection::vec(any::<u8>(), 0..=CHUNK_SIZE)) {
            let k = keys();
            let c = seal_chunk(&k, index, &data).unwrap();
            prop_assert_eq!(c.ciphertext.len(), data.len() + TAG_OVERHEAD);
            let parsed = EncryptedChunk::from_payload(direction::CHUNK, &c.to_payload()).unwrap();
            prop_assert_eq!(&parsed, &c);
            prop_assert_eq!(open_chunk(&k, &parsed, index).unwrap(), data);
        }
    }
}
