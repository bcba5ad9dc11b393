use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use tokio::io::{AsyncWriteExt, BufReader};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch, Mutex as AsyncMutex, OwnedSemaphorePermit, Semaphore};
use tokio::task::JoinSet;
use tokio::time::timeout;
use tracing::{debug, warn};

use super::registry::{Clock, JoinOutcome, JoinRateLimiter, RoomId, RoomRegistry, RoomState, SystemClock};
use super::store::{MetadataStore, RelayStats, SqliteStore};
use crate::pake::Role;
use crate::wire::{encode_frame, read_frame, write_frame, Frame, FrameKind, JoinPayload, PROTOCOL_VERSION};

/// Frames allowed in flight per direction before the relay stops reading.
pub const MAX_IN_FLIGHT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RateLimit {
    pub max_joins: usize,
    pub window: Duration,
}

impl Default for RateLimit {
    fn default() -> Self {
        Self {
            max_joins: 10,
            window: Duration::from_secs(60),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RelayConfig {
    /// Age at which a waiting room is discarded.
    pub room_ttl: Duration,
    /// How long a fresh connection may take to send JOIN.
    pub join_timeout: Duration,
    pub rate_limit: Option<RateLimit>,
    /// After one side's FIN, how long to wait for the other side's FIN.
    pub fin_linger: Duration,
    /// Grace period for glued sessions on shutdown.
    pub drain_timeout: Duration,
    pub sweep_interval: Duration,
}

impl Default for RelayConfig {
    fn default() -> Self {
        Self {
            room_ttl: Duration::from_secs(600),
            join_timeout: Duration::from_secs(30),
            rate_limit: Some(RateLimit::default()),
            fin_linger: Duration::from_secs(30),
            drain_timeout: Duration::from_secs(30),
            sweep_interval: Duration::from_secs(5),
        }
    }
}

/// Hook invoked on every frame the relay forwards between glued peers.
/// Production relays have none; tests use it to capture or tamper.
pub trait FrameObserver: Send + Sync {
    fn on_frame(&self, room_id: &RoomId, from: Role, frame: &mut Frame);
}

/// High-water marks of relay-side buffering, per direction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BufferPeak {
    pub bytes: usize,
    pub frames: usize,
}

struct Peer {
    stream: TcpStream,
    addr: SocketAddr,
    role: Role,
}

type Handoff = oneshot::Sender<Peer>;

struct Shared {
    config: RelayConfig,
    registry: Mutex<RoomRegistry<Handoff>>,
    limiter: Option<Mutex<JoinRateLimiter>>,
    store: Arc<dyn MetadataStore>,
    clock: Arc<dyn Clock>,
    observer: Option<Arc<dyn FrameObserver>>,
    bytes_relayed: AtomicU64,
    sessions_completed: AtomicU64,
    peak_bytes: AtomicUsize,
    peak_frames: AtomicUsize,
}

impl Shared {
    fn log_store<T>(&self, what: &str, res: Result<T, super::store::StoreError>) {
        if let Err(e) = res {
            warn!(error = %e, "metadata store {what} failed");
        }
    }

    fn expire(&self) -> usize {
        let now = self.clock.now();
        let expired = self.registry.lock().expect("registry poisoned").expire_rooms(now);
        if let Some(l) = &self.limiter {
            l.lock().expect("limiter poisoned").prune(now);
        }
        let cutoff = unix_now() - self.config.room_ttl.as_secs() as i64;
        self.log_store("sweep", self.store.sweep(cutoff));
        expired
    }
}

fn unix_now() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// Builder for a relay instance.
pub struct RelayServer {
    config: RelayConfig,
    store: Option<Arc<dyn MetadataStore>>,
    clock: Arc<dyn Clock>,
    observer: Option<Arc<dyn FrameObserver>>,
}

impl RelayServer {
    pub fn new(config: RelayConfig) -> Self {
        Self {
            config,
            store: None,
            clock: Arc::new(SystemClock::new()),
            observer: None,
        }
    }

    pub fn with_store(mut self, store: Arc<dyn MetadataStore>) -> Self {
        self.store = Some(store);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_observer(mut self, observer: Arc<dyn FrameObserver>) -> Self {
        self.observer = Some(observer);
        self
    }

    /// Binds the listener and starts serving in the background.
    pub async fn bind(self, addr: SocketAddr) -> std::io::Result<RunningRelay> {
        let store = match self.store {
            Some(s) => s,
            None => Arc::new(SqliteStore::in_memory().map_err(std::io::Error::other)?),
        };
        let listener = TcpListener::bind(addr).await?;
        let local_addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            registry: Mutex::new(RoomRegistry::new(self.config.room_ttl)),
            limiter: self
                .config
                .rate_limit
                .map(|r| Mutex::new(JoinRateLimiter::new(r.max_joins, r.window))),
            config: self.config,
            store,
            clock: self.clock,
            observer: self.observer,
            bytes_relayed: AtomicU64::new(0),
            sessions_completed: AtomicU64::new(0),
            peak_bytes: AtomicUsize::new(0),
            peak_frames: AtomicUsize::new(0),
        });
        let (shutdown_tx, shutdown_rx) = watch::channel(false);
        let task = tokio::spawn(accept_loop(shared.clone(), listener, shutdown_rx));
        Ok(RunningRelay {
            local_addr,
            shared,
            shutdown: shutdown_tx,
            task,
        })
    }
}

/// Handle to a serving relay.
pub struct RunningRelay {
    local_addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: watch::Sender<bool>,
    task: tokio::task::JoinHandle<()>,
}

impl RunningRelay {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Live counters of this process.
    pub fn stats(&self) -> RelayStats {
        RelayStats {
            rooms_active: self.shared.registry.lock().expect("registry poisoned").rooms_active() as u64,
            bytes_relayed: self.shared.bytes_relayed.load(Ordering::Relaxed),
            sessions_completed: self.shared.sessions_completed.load(Ordering::Relaxed),
        }
    }

    pub fn buffer_peak(&self) -> BufferPeak {
        BufferPeak {
            bytes: self.shared.peak_bytes.load(Ordering::Relaxed),
            frames: self.shared.peak_frames.load(Ordering::Relaxed),
        }
    }

    /// Runs an expiry sweep immediately.
    pub fn expire_rooms(&self) -> usize {
        self.shared.expire()
    }

    /// Stops accepting, closes waiting rooms and drains glued sessions.
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        let _ = self.task.await;
    }
}

async fn accept_loop(shared: Arc<Shared>, listener: TcpListener, mut shutdown: watch::Receiver<bool>) {
    let mut tasks = JoinSet::new();
    let mut sweep = tokio::time::interval(shared.config.sweep_interval);
    sweep.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, addr)) => {
                    tasks.spawn(handle_conn(shared.clone(), stream, addr, shutdown.clone()));
                }
                Err(e) => warn!(error = %e, "accept failed"),
            },
            _ = shutdown.changed() => break,
            _ = sweep.tick() => {
                let n = shared.expire();
                if n > 0 {
                    debug!(expired = n, "expired waiting rooms");
                }
            }
            Some(_) = tasks.join_next(), if !tasks.is_empty() => {}
        }
    }
    drop(listener);
    let drain = async { while tasks.join_next().await.is_some() {} };
    if timeout(shared.config.drain_timeout, drain).await.is_err() {
        tasks.abort_all();
    }
}

async fn reject(stream: &mut TcpStream, reason: &str) {
    let _ = write_frame(stream, &Frame::error(reason)).await;
    let _ = stream.shutdown().await;
}

async fn handle_conn(shared: Arc<Shared>, mut stream: TcpStream, addr: SocketAddr, shutdown: watch::Receiver<bool>) {
    let _ = stream.set_nodelay(true);
    // Read straight from the socket: nothing past the JOIN frame may be
    // consumed before the connection is handed to the glue.
    let first = match timeout(shared.config.join_timeout, read_frame(&mut stream)).await {
        Ok(Ok(frame)) => frame,
        Ok(Err(e)) if e.is_protocol() => return reject(&mut stream, "protocol").await,
        Ok(Err(_)) => return,
        Err(_) => return reject(&mut stream, "join timeout").await,
    };
    if first.kind != FrameKind::Join {
        return reject(&mut stream, "protocol: expected JOIN").await;
    }
    let Ok(join) = JoinPayload::decode(&first.payload) else {
        return reject(&mut stream, "protocol: malformed JOIN").await;
    };
    if join.protocol_version != PROTOCOL_VERSION {
        return reject(&mut stream, "version").await;
    }
    let now = shared.clock.now();
    if let Some(limiter) = &shared.limiter {
        if !limiter.lock().expect("limiter poisoned").allow(addr.ip(), now) {
            return reject(&mut stream, "rate limited").await;
        }
    }

    let (tx, rx) = oneshot::channel();
    let outcome = shared
        .registry
        .lock()
        .expect("registry poisoned")
        .join(join.room_id, join.role, addr, now, tx);
    let room = join.room_id;
    match outcome {
        Err(rejection) => reject(&mut stream, rejection.reason()).await,
        Ok(JoinOutcome::Waiting { ticket }) => {
            shared.log_store("join", shared.store.record_join(&room, join.role, addr, unix_now()));
            let me = Peer {
                stream,
                addr,
                role: join.role,
            };
            wait_for_partner(shared, room, me, ticket, rx, shutdown).await;
        }
        Ok(JoinOutcome::Glued { first, .. }) => {
            shared.log_store("join", shared.store.record_join(&room, join.role, addr, unix_now()));
            shared.log_store("state", shared.store.set_state(&room, RoomState::Glued));
            let me = Peer {
                stream,
                addr,
                role: join.role,
            };
            if let Err(mut me) = first.send(me) {
                // waiting peer left between registry lookup and handoff
                reject(&mut me.stream, "peer gone").await;
                close_room(&shared, &room);
            }
        }
    }
}

fn close_room(shared: &Shared, room: &RoomId) {
    shared.registry.lock().expect("registry poisoned").close(room);
    shared.log_store("remove", shared.store.remove_room(room));
}

async fn wait_for_partner(
    shared: Arc<Shared>,
    room: RoomId,
    mut me: Peer,
    ticket: u64,
    mut rx: oneshot::Receiver<Peer>,
    mut shutdown: watch::Receiver<bool>,
) {
    let mut probe = [0u8; 1];
    let leave_reason = tokio::select! {
        partner = &mut rx => match partner {
            Ok(partner) => return run_session(shared, room, me, partner).await,
            // registry dropped the handoff: expired or replaced
            Err(_) => Some("room expired"),
        },
        // EOF, or bytes before ROOM_READY; either way the peer is done
        _ = me.stream.peek(&mut probe) => None,
        _ = shutdown.changed() => Some("relay shutting down"),
    };
    shared.registry.lock().expect("registry poisoned").cancel_waiting(&room, ticket);
    rx.close();
    if let Ok(mut late) = rx.try_recv() {
        reject(&mut late.stream, "peer gone").await;
        close_room(&shared, &room);
    } else {
        shared.log_store("remove", shared.store.remove_room(&room));
    }
    if let Some(reason) = leave_reason {
        reject(&mut me.stream, reason).await;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PumpEnd {
    /// FIN forwarded.
    Fin,
    /// Source closed or sent garbage; queued frames were still delivered.
    SourceGone,
    /// Destination stopped accepting writes.
    DestGone,
}

enum ReadEnd {
    Fin,
    Gone,
}

struct SessionCtx {
    shared: Arc<Shared>,
    room: RoomId,
    bytes: AtomicU64,
}

impl SessionCtx {
    fn count(&self, frame: &Frame) {
        // sealed kinds only; handshake frames are not ciphertext
        if matches!(
            frame.kind,
            FrameKind::PeerInfo | FrameKind::Manifest | FrameKind::Chunk | FrameKind::Fin
        ) {
            let n = frame.payload.len() as u64;
            self.bytes.fetch_add(n, Ordering::Relaxed);
            self.shared.bytes_relayed.fetch_add(n, Ordering::Relaxed);
        }
    }
}

#[derive(Default)]
struct Gauge {
    bytes: AtomicUsize,
    frames: AtomicUsize,
}

impl Gauge {
    fn add(&self, n: usize, shared: &Shared) {
        let b = self.bytes.fetch_add(n, Ordering::SeqCst) + n;
        let f = self.frames.fetch_add(1, Ordering::SeqCst) + 1;
        shared.peak_bytes.fetch_max(b, Ordering::Relaxed);
        shared.peak_frames.fetch_max(f, Ordering::Relaxed);
    }

    fn sub(&self, n: usize) {
        self.bytes.fetch_sub(n, Ordering::SeqCst);
        self.frames.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn pump(
    ctx: Arc<SessionCtx>,
    from: Role,
    src: OwnedReadHalf,
    dst: Arc<AsyncMutex<OwnedWriteHalf>>,
) -> PumpEnd {
    let permits = Arc::new(Semaphore::new(MAX_IN_FLIGHT));
    let gauge = Gauge::default();
    let (tx, mut rx) = mpsc::unbounded_channel::<(Frame, OwnedSemaphorePermit)>();
    let mut src = BufReader::new(src);

    let reader = async {
        let tx = tx;
        loop {
            let permit = permits.clone().acquire_owned().await.expect("semaphore is never closed");
            let mut frame = match read_frame(&mut src).await {
                Ok(f) => f,
                Err(_) => return ReadEnd::Gone,
            };
            if let Some(obs) = &ctx.shared.observer {
                obs.on_frame(&ctx.room, from, &mut frame);
            }
            ctx.count(&frame);
            gauge.add(frame.wire_len(), &ctx.shared);
            let fin = frame.kind == FrameKind::Fin;
            if tx.send((frame, permit)).is_err() {
                return ReadEnd::Gone;
            }
            if fin {
                return ReadEnd::Fin;
            }
        }
    };
    let writer = async {
        while let Some((frame, permit)) = rx.recv().await {
            let len = frame.wire_len();
            let res = match encode_frame(&frame) {
                Ok(bytes) => dst.lock().await.write_all(&bytes).await.map_err(|_| ()),
                Err(_) => Err(()),
            };
            gauge.sub(len);
            drop(permit);
            res?;
        }
        Ok::<(), ()>(())
    };
    tokio::pin!(reader, writer);
    let mut read_end = None;
    loop {
        tokio::select! {
            r = &mut reader, if read_end.is_none() => read_end = Some(r),
            w = &mut writer => {
                return match (w, read_end) {
                    (Err(()), _) => PumpEnd::DestGone,
                    (Ok(()), Some(ReadEnd::Fin)) => PumpEnd::Fin,
                    (Ok(()), _) => PumpEnd::SourceGone,
                };
            }
        }
    }
}

async fn send_error(w: &AsyncMutex<OwnedWriteHalf>, reason: &str) {
    let mut w = w.lock().await;
    let _ = write_frame(&mut *w, &Frame::error(reason)).await;
}

async fn run_session(shared: Arc<Shared>, room: RoomId, mut a: Peer, mut b: Peer) {
    // Each peer learns the address the relay observed for it.
    for first in [true, false] {
        let (this, other) = if first { (&mut a, &mut b) } else { (&mut b, &mut a) };
        let ready = Frame::new(FrameKind::RoomReady, this.addr.to_string().into_bytes());
        if write_frame(&mut this.stream, &ready).await.is_err() {
            reject(&mut other.stream, "peer gone").await;
            close_room(&shared, &room);
            return;
        }
    }
    debug!(a = %a.addr, b = %b.addr, "room glued");

    let ctx = Arc::new(SessionCtx {
        shared: shared.clone(),
        room,
        bytes: AtomicU64::new(0),
    });
    let (ar, aw) = a.stream.into_split();
    let (br, bw) = b.stream.into_split();
    let aw = Arc::new(AsyncMutex::new(aw));
    let bw = Arc::new(AsyncMutex::new(bw));
    let mut ab = tokio::spawn(pump(ctx.clone(), a.role, ar, bw.clone()));
    let mut ba = tokio::spawn(pump(ctx.clone(), b.role, br, aw.clone()));

    // (end, source writer, destination writer, the other pump)
    let (end, src_w, dst_w, mut other) = tokio::select! {
        r = &mut ab => (r, aw.clone(), bw.clone(), ba),
        r = &mut ba => (r, bw.clone(), aw.clone(), ab),
    };
    let completed = match end {
        Ok(PumpEnd::Fin) => {
            match timeout(shared.config.fin_linger, &mut other).await {
                Ok(Ok(PumpEnd::SourceGone)) => send_error(&src_w, "peer gone").await,
                Ok(_) => {}
                Err(_) => other.abort(),
            }
            true
        }
        Ok(PumpEnd::SourceGone) => {
            other.abort();
            send_error(&dst_w, "peer gone").await;
            false
        }
        Ok(PumpEnd::DestGone) | Err(_) => {
            other.abort();
            send_error(&src_w, "peer gone").await;
            false
        }
    };
    for w in [&aw, &bw] {
        let _ = w.lock().await.shutdown().await;
    }

    if completed {
        shared.sessions_completed.fetch_add(1, Ordering::Relaxed);
    }
    let bytes = ctx.bytes.load(Ordering::Relaxed);
    shared.log_store("session", shared.store.record_session(&room, bytes, completed, unix_now()));
    close_room(&shared, &room);
    debug!(bytes, completed, "session closed");
}
