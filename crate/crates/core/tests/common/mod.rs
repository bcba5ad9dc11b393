#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use relaywire::pake::Role;
use relaywire::relay::{FrameObserver, RelayConfig, RelayServer, RoomId, RunningRelay};
use relaywire::transport::{DirectPolicy, TransportConfig};
use relaywire::wire::{Frame, FrameKind};
use sha2::{Digest, Sha256};

pub fn relay_config() -> RelayConfig {
    RelayConfig {
        rate_limit: None,
        fin_linger: Duration::from_secs(5),
        drain_timeout: Duration::from_secs(5),
        ..RelayConfig::default()
    }
}

pub async fn start_relay(observer: Option<Arc<dyn FrameObserver>>) -> RunningRelay {
    let mut server = RelayServer::new(relay_config());
    if let Some(o) = observer {
        server = server.with_observer(o);
    }
    server.bind("127.0.0.1:0".parse().unwrap()).await.unwrap()
}

pub fn client_config(relay: &RunningRelay, direct: DirectPolicy) -> TransportConfig {
    let mut c = TransportConfig::new(relay.local_addr().to_string());
    c.direct = direct;
    c.listen_ip = [127, 0, 0, 1].into();
    c.rendezvous_timeout = Duration::from_secs(10);
    c
}

pub fn random_file(dir: &Path, name: &str, size: u64, seed: u64) -> PathBuf {
    let path = dir.join(name);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).unwrap());
    let mut rng = StdRng::seed_from_u64(seed);
    let mut buf = vec![0u8; 1 << 20];
    let mut left = size;
    while left > 0 {
        let n = left.min(buf.len() as u64) as usize;
        rng.fill_bytes(&mut buf[..n]);
        f.write_all(&buf[..n]).unwrap();
        left -= n as u64;
    }
    f.flush().unwrap();
    path
}

pub fn digest(path: &Path) -> [u8; 32] {
    let mut h = Sha256::new();
    let mut f = std::fs::File::open(path).unwrap();
    std::io::copy(&mut f, &mut h).unwrap();
    h.finalize().into()
}

/// Records every forwarded frame.
#[derive(Default)]
pub struct Capture {
    pub frames: Mutex<Vec<(Role, FrameKind, Vec<u8>)>>,
}

impl Capture {
    pub fn kinds(&self) -> Vec<(Role, FrameKind)> {
        self.frames.lock().unwrap().iter().map(|(r, k, _)| (*r, *k)).collect()
    }

    pub fn all_bytes(&self) -> Vec<u8> {
        self.frames.lock().unwrap().iter().flat_map(|(_, _, p)| p.clone()).collect()
    }

    pub fn count(&self, kind: FrameKind) -> usize {
        self.frames.lock().unwrap().iter().filter(|(_, k, _)| *k == kind).count()
    }
}

impl FrameObserver for Capture {
    fn on_frame(&self, _room: &RoomId, from: Role, frame: &mut Frame) {
        self.frames.lock().unwrap().push((from, frame.kind, frame.payload.clone()));
    }
}

/// Malicious relay: flips one bit of one CHUNK frame's ciphertext.
pub struct BitFlipper {
    pub chunk: usize,
    /// Bit offset within the ciphertext (after the 8-byte index).
    pub bit: usize,
    seen: Mutex<usize>,
}

impl BitFlipper {
    pub fn new(chunk: usize, bit: usize) -> Self {
        Self {
            chunk,
            bit,
            seen: Mutex::new(0),
        }
    }
}

impl FrameObserver for BitFlipper {
    fn on_frame(&self, _room: &RoomId, _from: Role, frame: &mut Frame) {
        if frame.kind != FrameKind::Chunk {
            return;
        }
        let mut seen = self.seen.lock().unwrap();
        if *seen == self.chunk {
            let ct = &mut frame.payload[8..];
            let bit = self.bit % (ct.len() * 8);
            ct[bit / 8] ^= 1 << (bit % 8);
        }
        *seen += 1;
    }
}
