//! Rendezvous relay. Pairs a sender and a receiver by room identifier and
//! then forwards frames between them without looking inside.

mod registry;
mod server;
mod store;

pub use registry::{
    Clock, JoinOutcome, JoinRateLimiter, JoinRejection, ManualClock, RoomId, RoomRecord, RoomRegistry, RoomState,
    SystemClock,
};
pub use server::{BufferPeak, FrameObserver, RateLimit, RelayConfig, RelayServer, RunningRelay, MAX_IN_FLIGHT};
pub use store::{MetadataStore, RelayStats, SqliteStore, StoreError};
