use std::collections::{HashMap, VecDeque};
use std::net::{IpAddr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::pake::Role;

pub type RoomId = [u8; 32];

/// Monotonic time source, injectable for tests.
pub trait Clock: Send + Sync {
    /// Time elapsed since an arbitrary fixed origin.
    fn now(&self) -> Duration;
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock {
    nanos: AtomicU64,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, by: Duration) {
        self.nanos.fetch_add(by.as_nanos() as u64, Ordering::SeqCst);
    }

    pub fn set(&self, at: Duration) {
        self.nanos.store(at.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RoomState {
    Waiting,
    Glued,
    Closed,
}

impl RoomState {
    pub fn as_str(self) -> &'static str {
        match self {
            RoomState::Waiting => "waiting",
            RoomState::Glued => "glued",
            RoomState::Closed => "closed",
        }
    }
}

/// Rendezvous entry. `handle` is whatever the server needs to reach the
/// waiting peer; it is taken out when the second peer arrives.
#[derive(Debug)]
pub struct RoomRecord<C> {
    pub room_id: RoomId,
    pub first_role: Role,
    pub first_addr: SocketAddr,
    pub created_at: Duration,
    pub state: RoomState,
    ticket: u64,
    handle: Option<C>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum JoinOutcome<C> {
    /// First arrival; `ticket` identifies this waiting entry.
    Waiting { ticket: u64 },
    /// Second arrival; carries the first peer's handle.
    Glued {
        first: C,
        first_role: Role,
        first_addr: SocketAddr,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JoinRejection {
    RoleTaken,
    RoomFull,
}

impl JoinRejection {
    pub fn reason(self) -> &'static str {
        match self {
            JoinRejection::RoleTaken => "role taken",
            JoinRejection::RoomFull => "room full",
        }
    }
}

/// Pairs peers by room identifier.
#[derive(Debug)]
pub struct RoomRegistry<C> {
    rooms: HashMap<RoomId, RoomRecord<C>>,
    ttl: Duration,
    next_ticket: u64,
}

impl<C> RoomRegistry<C> {
    pub fn new(ttl: Duration) -> Self {
        Self {
            rooms: HashMap::new(),
            ttl,
            next_ticket: 1,
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    fn is_stale(&self, rec: &RoomRecord<C>, now: Duration) -> bool {
        rec.state == RoomState::Waiting && now.saturating_sub(rec.created_at) >= self.ttl
    }

    pub fn join(
        &mut self,
        room_id: RoomId,
        role: Role,
        addr: SocketAddr,
        now: Duration,
        handle: C,
    ) -> Result<JoinOutcome<C>, JoinRejection> {
        if let Some(existing) = self.rooms.get(&room_id) {
            if self.is_stale(existing, now) {
                self.rooms.remove(&room_id);
            }
        }
        match self.rooms.get_mut(&room_id) {
            None => {
                let ticket = self.next_ticket;
                self.next_ticket += 1;
                self.rooms.insert(
                    room_id,
                    RoomRecord {
                        room_id,
                        first_role: role,
                        first_addr: addr,
                        created_at: now,
                        state: RoomState::Waiting,
                        ticket,
                        handle: Some(handle),
                    },
                );
                Ok(JoinOutcome::Waiting { ticket })
            }
            Some(rec) if rec.state != RoomState::Waiting => Err(JoinRejection::RoomFull),
            Some(rec) if rec.first_role == role => Err(JoinRejection::RoleTaken),
            Some(rec) => {
                rec.state = RoomState::Glued;
                let first = rec.handle.take().expect("waiting room holds its peer");
                Ok(JoinOutcome::Glued {
                    first,
                    first_role: rec.first_role,
                    first_addr: rec.first_addr,
                })
            }
        }
    }

    /// Drops a waiting entry whose peer went away. No-op if the room has
    /// moved on (glued, or replaced by a newer ticket).
    pub fn cancel_waiting(&mut self, room_id: &RoomId, ticket: u64) -> bool {
        let matches = self
            .rooms
            .get(room_id)
            .is_some_and(|r| r.state == RoomState::Waiting && r.ticket == ticket);
        if matches {
            self.rooms.remove(room_id);
        }
        matches
    }

    /// Removes a room after its session ended.
    pub fn close(&mut self, room_id: &RoomId) {
        if let Some(rec) = self.rooms.get_mut(room_id) {
            rec.state = RoomState::Closed;
        }
        self.rooms.remove(room_id);
    }

    /// Removes waiting rooms at least `ttl` old. Glued rooms are untouched.
    pub fn expire_rooms(&mut self, now: Duration) -> usize {
        let ttl = self.ttl;
        let before = self.rooms.len();
        self.rooms.retain(|_, r| {
            !(r.state == RoomState::Waiting && now.saturating_sub(r.created_at) >= ttl)
        });
        before - self.rooms.len()
    }

    pub fn get(&self, room_id: &RoomId) -> Option<&RoomRecord<C>> {
        self.rooms.get(room_id)
    }

    pub fn rooms_active(&self) -> usize {
        self.rooms.len()
    }
}

/// Sliding-window JOIN limiter per source IP.
#[derive(Debug)]
pub struct JoinRateLimiter {
    max_joins: usize,
    window: Duration,
    seen: HashMap<IpAddr, VecDeque<Duration>>,
}

impl JoinRateLimiter {
    pub fn new(max_joins: usize, window: Duration) -> Self {
        Self {
            max_joins,
            window,
            seen: HashMap::new(),
        }
    }

    /// Records a JOIN attempt; `false` when the source is over its budget.
    pub fn allow(&mut self, ip: IpAddr, now: Duration) -> bool {
        let window = self.window;
        let hits = self.seen.entry(ip).or_default();
        while hits.front().is_some_and(|t| now.saturating_sub(*t) >= window) {
            hits.pop_front();
        }
        if hits.len() >= self.max_joins {
            return false;
        }
        hits.push_back(now);
        true
    }

    pub fn prune(&mut self, now: Duration) {
        let window = self.window;
        self.seen.retain(|_, hits| {
            hits.retain(|t| now.saturating_sub(*t) < window);
            !hits.is_empty()
        });
    }
}
