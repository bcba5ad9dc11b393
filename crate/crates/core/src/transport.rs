//! Session establishment: rendezvous at the relay, run the PAKE over the
//! glued channel, exchange sealed peer addresses, then try a direct TCP
//! connection and fall back to the relay if it does not bind.

use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use hmac::{Hmac, Mac};
use rand_core::OsRng;
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::time::{timeout, Instant};
use tracing::{debug, warn};

use crate::group::{Group, GroupParams, Ristretto255};
use crate::pake::{
    confirm_tag, hash_password_with_cost, verify_peer_tag, ConfirmationTag, PakeError, PakeState,
    PasswordHashCost, Role, SessionKeys, Verdict,
};
use crate::transfer::{direction, open_record, seal_record, ChannelMode};
use crate::wire::{Frame, FrameKind, FramedStream, JoinPayload, WireError, ROOM_ID_LEN};

pub const RENDEZVOUS_TIMEOUT: Duration = Duration::from_secs(30);
pub const DIRECT_TIMEOUT: Duration = Duration::from_secs(3);
/// Mixed into the confirmation-key derivation.
pub const SESSION_AAD: &[u8] = b"relaywire/1";
const ROOM_LABEL: &[u8] = b"relaywire room";
const BIND_LABEL: &[u8] = b"direct-bind";
const PEER_INFO_LEN: usize = 64;

pub type RoomId = [u8; ROOM_ID_LEN];

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cannot reach relay {addr}: {source}")]
    RelayUnreachable { addr: String, source: io::Error },
    #[error("no peer joined within {0:?}")]
    RendezvousTimeout(Duration),
    #[error("relay refused: {0}")]
    Relay(String),
    #[error("peer aborted: {0}")]
    PeerAborted(String),
    #[error("wrong passphrase or tampering")]
    Authentication,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Pake(PakeError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<PakeError> for TransportError {
    fn from(e: PakeError) -> Self {
        match e {
            // a share that fails to decode or is the identity can only
            // come from a tampered channel
            PakeError::IdentityShare | PakeError::Group(_) | PakeError::MalformedTag(_) => {
                TransportError::Authentication
            }
            other => TransportError::Pake(other),
        }
    }
}

/// Which halves of the direct probe are allowed to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirectPolicy {
    /// Receiver opens a listener and advertises it.
    pub listen: bool,
    /// Sender dials an advertised listener.
    pub dial: bool,
    /// Send a wrong binding tag on the direct channel. Testing aid only.
    pub forge_binding: bool,
}

impl Default for DirectPolicy {
    fn default() -> Self {
        Self {
            listen: true,
            dial: true,
            forge_binding: false,
        }
    }
}

impl DirectPolicy {
    pub fn relay_only() -> Self {
        Self {
            listen: false,
            dial: false,
            forge_binding: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransportConfig {
    /// `host:port` of the relay.
    pub relay: String,
    pub rendezvous_timeout: Duration,
    pub direct_timeout: Duration,
    pub direct: DirectPolicy,
    /// Address the receiver's direct listener binds to.
    pub listen_ip: IpAddr,
    pub cost: PasswordHashCost,
}

impl TransportConfig {
    pub fn new(relay: impl Into<String>) -> Self {
        Self {
            relay: relay.into(),
            rendezvous_timeout: RENDEZVOUS_TIMEOUT,
            direct_timeout: DIRECT_TIMEOUT,
            direct: DirectPolicy::default(),
            listen_ip: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            cost: PasswordHashCost::INTERACTIVE,
        }
    }
}

/// The channel a session ended up on.
pub struct ChannelChoice {
    pub mode: ChannelMode,
    pub stream: FramedStream<TcpStream>,
    pub peer_addr: Option<SocketAddr>,
}

impl std::fmt::Debug for ChannelChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChannelChoice")
            .field("mode", &self.mode)
            .field("peer_addr", &self.peer_addr)
            .finish_non_exhaustive()
    }
}

/// A confirmed session ready for the transfer layer.
#[derive(Debug)]
pub struct Session {
    pub channel: ChannelChoice,
    pub keys: SessionKeys,
    pub role: Role,
    /// Non-fatal security events, e.g. a direct peer that failed binding.
    pub warnings: Vec<String>,
}

/// Rendezvous identifier presented to the relay in place of the passphrase.
pub fn room_id(passphrase: &str) -> RoomId {
    let mut h = Sha256::new();
    h.update(ROOM_LABEL);
    h.update(passphrase.as_bytes());
    h.finalize().into()
}

/// Joins `room` at the relay and waits for the peer.
///
/// Returns the glued stream and the address the relay observed for us.
pub async fn rendezvous(
    relay: &str,
    room: RoomId,
    role: Role,
    wait: Duration,
) -> Result<(FramedStream<TcpStream>, SocketAddr), TransportError> {
    let deadline = Instant::now() + wait;
    let tcp = match tokio::time::timeout_at(deadline, TcpStream::connect(relay)).await {
        Ok(Ok(s)) => s,
        Ok(Err(source)) => {
            return Err(TransportError::RelayUnreachable {
                addr: relay.to_string(),
                source,
            })
        }
        Err(_) => return Err(TransportError::RendezvousTimeout(wait)),
    };
    tcp.set_nodelay(true)?;
    let mut framed = FramedStream::new(tcp);
    framed.send(&JoinPayload::new(room, role).to_frame()).await?;
    let reply = match tokio::time::timeout_at(deadline, framed.recv()).await {
        Ok(r) => r?,
        Err(_) => return Err(TransportError::RendezvousTimeout(wait)),
    };
    match reply.kind {
        FrameKind::RoomReady => {
            let observed = std::str::from_utf8(&reply.payload)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TransportError::Protocol("unparseable ROOM_READY address".into()))?;
            Ok((framed, observed))
        }
        FrameKind::Error => Err(TransportError::Relay(reply.error_reason())),
        other => Err(TransportError::Protocol(format!("expected ROOM_READY, got {other:?}"))),
    }
}

async fn expect_frame(
    channel: &mut FramedStream<TcpStream>,
    kind: FrameKind,
) -> Result<Frame, TransportError> {
    let frame = channel.recv().await?;
    if frame.kind == kind {
        Ok(frame)
    } else if frame.kind == FrameKind::Error {
        let reason = frame.error_reason();
        Err(if reason.contains("authentication") {
            TransportError::Authentication
        } else {
            TransportError::PeerAborted(reason)
        })
    } else {
        Err(TransportError::Protocol(format!("expected {kind:?}, got {:?}", frame.kind)))
    }
}

/// Runs sPAKE2 and key confirmation over an already glued channel.
pub async fn run_pake(
    channel: &mut FramedStream<TcpStream>,
    w: <Ristretto255 as Group>::Scalar,
    role: Role,
) -> Result<SessionKeys, TransportError> {
    let params = GroupParams::<Ristretto255>::standard();
    let (state, share) = PakeState::start(
        role,
        w,
        role.identity(),
        role.peer().identity(),
        SESSION_AAD,
        &params,
        &mut OsRng,
    )?;
    channel
        .send(&Frame::new(FrameKind::PakeShare, Ristretto255::encode_element(&share)))
        .await?;
    let peer_share = expect_frame(channel, FrameKind::PakeShare).await?;
    let keys = state.finish_encoded(&peer_share.payload)?;

    let tag = confirm_tag(&keys, role);
    channel.send(&Frame::new(FrameKind::Confirm, tag.mac.to_vec())).await?;
    let peer_tag = expect_frame(channel, FrameKind::Confirm).await?;
    let peer_tag = ConfirmationTag::from_bytes(role.peer(), &peer_tag.payload)?;
    match verify_peer_tag(&keys, role, &peer_tag)? {
        Verdict::Accept => Ok(keys),
        Verdict::Reject => {
            let _ = channel.send(&Frame::error("authentication failed")).await;
            Err(TransportError::Authentication)
        }
    }
}

fn peer_info_direction(from: Role) -> u8 {
    match from {
        Role::Sender => direction::PEER_INFO_FROM_SENDER,
        Role::Receiver => direction::PEER_INFO_FROM_RECEIVER,
    }
}

/// Seals an optional address into a fixed-size PEER_INFO payload.
pub fn seal_peer_info(keys: &SessionKeys, from: Role, addr: Option<SocketAddr>) -> Vec<u8> {
    let text = addr.map(|a| a.to_string()).unwrap_or_default();
    let mut plain = [0u8; PEER_INFO_LEN];
    plain[0] = text.len() as u8;
    plain[1..1 + text.len()].copy_from_slice(text.as_bytes());
    seal_record(keys, peer_info_direction(from), 0, &plain)
}

pub fn open_peer_info(keys: &SessionKeys, from: Role, payload: &[u8]) -> Result<Option<SocketAddr>, TransportError> {
    let plain = open_record(keys, peer_info_direction(from), 0, payload).ok_or(TransportError::Authentication)?;
    if plain.len() != PEER_INFO_LEN || plain[0] as usize >= PEER_INFO_LEN {
        return Err(TransportError::Protocol("PEER_INFO layout".into()));
    }
    let len = plain[0] as usize;
    if len == 0 {
        return Ok(None);
    }
    std::str::from_utf8(&plain[1..1 + len])
        .ok()
        .and_then(|s| s.parse().ok())
        .map(Some)
        .ok_or_else(|| TransportError::Protocol("PEER_INFO address".into()))
}

/// `HMAC-SHA256(Ke, "direct-bind" || transcript_hash || role)`.
pub fn direct_bind_tag(keys: &SessionKeys, role: Role) -> [u8; 32] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(keys.ke()).expect("HMAC accepts any key length");
    mac.update(BIND_LABEL);
    mac.update(keys.transcript_hash());
    mac.update(&[role.to_byte()]);
    mac.finalize().into_bytes().into()
}

/// Authenticates a fresh direct connection. The sender proves itself
/// first; the receiver answers only after verifying, so a sender that
/// sees a valid answer knows both checks passed.
pub async fn bind_direct(
    channel: &mut FramedStream<TcpStream>,
    keys: &SessionKeys,
    role: Role,
    forge: bool,
    wait: Duration,
) -> Result<(), TransportError> {
    let mut tag = direct_bind_tag(keys, role);
    if forge {
        tag[0] ^= 0x80;
    }
    let own = Frame::new(FrameKind::Confirm, tag.to_vec());
    if role == Role::Sender {
        channel.send(&own).await?;
    }
    let frame = match timeout(wait, channel.recv()).await {
        Ok(f) => f?,
        Err(_) => return Err(TransportError::Protocol("direct binding timed out".into())),
    };
    let expected = direct_bind_tag(keys, role.peer());
    if frame.kind != FrameKind::Confirm || !bool::from(frame.payload.ct_eq(&expected)) {
        return Err(TransportError::Authentication);
    }
    if role == Role::Receiver {
        channel.send(&own).await?;
    }
    Ok(())
}

/// Full client flow with the room derived from the passphrase.
///
/// A receiver returns once the sender has committed to a channel: after
/// the relay FIN for a direct session, or after the first transfer frame
/// (left unread on the stream) for a relayed one. Run the transfer on the
/// sender side without waiting for the receiver's `establish` to return.
pub async fn establish(config: &TransportConfig, passphrase: &str, role: Role) -> Result<Session, TransportError> {
    establish_in_room(config, room_id(passphrase), passphrase, role).await
}

/// Like [`establish`] but with an explicit room, so a peer holding a
/// different passphrase can still meet us at the relay.
pub async fn establish_in_room(
    config: &TransportConfig,
    room: RoomId,
    passphrase: &str,
    role: Role,
) -> Result<Session, TransportError> {
    let pw = passphrase.to_string();
    let cost = config.cost;
    let w = tokio::task::spawn_blocking(move || hash_password_with_cost::<Ristretto255>(&pw, &room, cost))
        .await
        .map_err(|e| TransportError::Io(io::Error::other(e)))??;

    let (mut relay, observed) = rendezvous(&config.relay, room, role, config.rendezvous_timeout).await?;
    let keys = run_pake(&mut relay, w, role).await?;
    debug!(%role, "session confirmed");

    match role {
        Role::Sender => sender_channel(config, relay, keys, observed).await,
        Role::Receiver => receiver_channel(config, relay, keys, observed).await,
    }
}

async fn sender_channel(
    config: &TransportConfig,
    mut relay: FramedStream<TcpStream>,
    keys: SessionKeys,
    observed: SocketAddr,
) -> Result<Session, TransportError> {
    relay
        .send(&Frame::new(FrameKind::PeerInfo, seal_peer_info(&keys, Role::Sender, Some(observed))))
        .await?;
    let info = expect_frame(&mut relay, FrameKind::PeerInfo).await?;
    let advertised = open_peer_info(&keys, Role::Receiver, &info.payload)?;

    let mut warnings = Vec::new();
    if let (Some(addr), true) = (advertised, config.direct.dial) {
        match timeout(config.direct_timeout, TcpStream::connect(addr)).await {
            Ok(Ok(tcp)) => {
                tcp.set_nodelay(true)?;
                let mut direct = FramedStream::new(tcp);
                match bind_direct(&mut direct, &keys, Role::Sender, config.direct.forge_binding, config.direct_timeout).await {
                    Ok(()) => {
                        // tell the receiver over the relay that we moved
                        relay.send(&Frame::empty(FrameKind::Fin)).await?;
                        let _ = relay.shutdown().await;
                        return Ok(Session {
                            channel: ChannelChoice {
                                mode: ChannelMode::Direct,
                                stream: direct,
                                peer_addr: Some(addr),
                            },
                            keys,
                            role: Role::Sender,
                            warnings,
                        });
                    }
                    Err(e) => {
                        warn!(%addr, "direct channel failed binding; staying on relay");
                        warnings.push(format!("direct peer at {addr} failed channel binding ({e}); using relay"));
                    }
                }
            }
            Ok(Err(e)) => debug!(%addr, error = %e, "direct dial failed"),
            Err(_) => debug!(%addr, "direct dial timed out"),
        }
    }
    Ok(Session {
        channel: ChannelChoice {
            mode: ChannelMode::Relayed,
            stream: relay,
            peer_addr: advertised,
        },
        keys,
        role: Role::Sender,
        warnings,
    })
}

async fn receiver_channel(
    config: &TransportConfig,
    mut relay: FramedStream<TcpStream>,
    keys: SessionKeys,
    observed: SocketAddr,
) -> Result<Session, TransportError> {
    let listener = if config.direct.listen {
        match TcpListener::bind(SocketAddr::new(config.listen_ip, 0)).await {
            Ok(l) => Some(l),
            Err(e) => {
                debug!(error = %e, "direct listener unavailable");
                None
            }
        }
    } else {
        None
    };
    let advertised = match &listener {
        Some(l) => Some(SocketAddr::new(observed.ip(), l.local_addr()?.port())),
        None => None,
    };
    relay
        .send(&Frame::new(FrameKind::PeerInfo, seal_peer_info(&keys, Role::Receiver, advertised)))
        .await?;
    let info = expect_frame(&mut relay, FrameKind::PeerInfo).await?;
    let sender_addr = open_peer_info(&keys, Role::Sender, &info.payload)?;

    let noted = Arc::new(Mutex::new(Vec::new()));
    let accept_task = listener.map(|l| {
        let keys = keys.clone();
        let wait = config.direct_timeout;
        let forge = config.direct.forge_binding;
        tokio::spawn(accept_direct(l, keys, wait, forge, noted.clone()))
    });

    // The sender announces its choice on the relay: FIN for direct,
    // otherwise the transfer starts there.
    let next = relay.recv().await?;
    let take_warnings = || std::mem::take(&mut *noted.lock().expect("warnings lock poisoned"));
    if next.kind == FrameKind::Fin {
        let Some(task) = accept_task else {
            return Err(TransportError::Protocol("sender went direct but no listener was offered".into()));
        };
        let (stream, peer) = match timeout(config.direct_timeout * 2, task).await {
            Ok(Ok(Some(found))) => found,
            _ => return Err(TransportError::Protocol("sender went direct but no channel bound".into())),
        };
        let _ = relay.send(&Frame::empty(FrameKind::Fin)).await;
        let _ = relay.shutdown().await;
        return Ok(Session {
            channel: ChannelChoice {
                mode: ChannelMode::Direct,
                stream,
                peer_addr: Some(peer),
            },
            keys,
            role: Role::Receiver,
            warnings: take_warnings(),
        });
    }
    if let Some(task) = accept_task {
        task.abort();
        if let Ok(Some((_, peer))) = task.await {
            debug!(%peer, "dropping direct channel the sender did not choose");
        }
    }
    relay.unread(next);
    Ok(Session {
        channel: ChannelChoice {
            mode: ChannelMode::Relayed,
            stream: relay,
            peer_addr: sender_addr,
        },
        keys,
        role: Role::Receiver,
        warnings: take_warnings(),
    })
}

type Accepted = (FramedStream<TcpStream>, SocketAddr);

/// Accepts until a connection presents the sender's binding tag or the
/// window closes. Connections that fail binding are dropped and noted.
async fn accept_direct(
    listener: TcpListener,
    keys: SessionKeys,
    wait: Duration,
    forge: bool,
    warnings: Arc<Mutex<Vec<String>>>,
) -> Option<Accepted> {
    let deadline = Instant::now() + wait * 2;
    loop {
        let (tcp, peer) = tokio::time::timeout_at(deadline, listener.accept()).await.ok()?.ok()?;
        let _ = tcp.set_nodelay(true);
        let mut framed = FramedStream::new(tcp);
        match bind_direct(&mut framed, &keys, Role::Receiver, forge, wait).await {
            Ok(()) => return Some((framed, peer)),
            Err(e) => {
                warn!(%peer, "direct connection failed binding");
                let note = format!("rejected direct connection from {peer}: {e}");
                warnings.lock().expect("warnings lock poisoned").push(note);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys() -> SessionKeys {
        SessionKeys::derive(b"transcript".to_vec(), SESSION_AAD)
    }

    #[test]
    fn room_id_is_not_the_passphrase() {
        let r = room_id("acid-bulb-cram-deny");
        assert_eq!(r, room_id("acid-bulb-cram-deny"));
        assert_ne!(r, room_id("acid-bulb-cram-denz"));
        let mut h = Sha256::new();
        h.update(b"relaywire room");
        h.update(b"acid-bulb-cram-deny");
        assert_eq!(r, <[u8; 32]>::from(h.finalize()));
    }

    #[test]
    fn peer_info_round_trip_and_padding() {
        let k = keys();
        let addr: SocketAddr = "203.0.113.7:40123".parse().unwrap();
        let sealed = seal_peer_info(&k, Role::Receiver, Some(addr));
        let empty = seal_peer_info(&k, Role::Receiver, None);
        assert_eq!(sealed.len(), empty.len());
        assert!(!sealed.windows(11).any(|w| w == b"203.0.113.7"));
        assert_eq!(open_peer_info(&k, Role::Receiver, &sealed).unwrap(), Some(addr));
        assert_eq!(open_peer_info(&k, Role::Receiver, &empty).unwrap(), None);
        // direction-bound: a receiver record does not open as a sender one
        assert!(matches!(
            open_peer_info(&k, Role::Sender, &sealed),
            Err(TransportError::Authentication)
        ));
    }

    #[test]
    fn binding_tags_are_role_separated() {
        let k = keys();
        assert_ne!(direct_bind_tag(&k, Role::Sender), direct_bind_tag(&k, Role::Receiver));
        let other = SessionKeys::derive(b"transcript2".to_vec(), SESSION_AAD);
        assert_ne!(direct_bind_tag(&k, Role::Sender), direct_bind_tag(&other, Role::Sender));
    }

    #[tokio::test]
    async fn relay_down_is_not_a_timeout() {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap();
        drop(l);
        match rendezvous(&addr.to_string(), [0; 32], Role::Sender, Duration::from_secs(5)).await {
            Err(TransportError::RelayUnreachable { .. }) => {}
            Err(other) => panic!("{other}"),
            Ok(_) => panic!("connected to a closed port"),
        }
    }
}
