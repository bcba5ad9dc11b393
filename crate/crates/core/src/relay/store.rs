//! Connection-metadata store. Holds room identifiers, roles, addresses and
//! session counters; frame payloads never reach it.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Mutex;

use rusqlite::{params, Connection, OptionalExtension};
use serde::Serialize;
use thiserror::Error;

use super::registry::{RoomId, RoomState};
use crate::pake::Role;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Sqlite(#[from] rusqlite::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RelayStats {
    pub rooms_active: u64,
    /// Forwarded payload bytes of sealed frames (headers excluded).
    pub bytes_relayed: u64,
    pub sessions_completed: u64,
}

pub trait MetadataStore: Send + Sync {
    fn record_join(&self, room_id: &RoomId, role: Role, addr: SocketAddr, at_unix: i64) -> Result<(), StoreError>;
    fn set_state(&self, room_id: &RoomId, state: RoomState) -> Result<(), StoreError>;
    fn remove_room(&self, room_id: &RoomId) -> Result<(), StoreError>;
    fn record_session(&self, room_id: &RoomId, bytes_relayed: u64, completed: bool, at_unix: i64) -> Result<(), StoreError>;
    /// Deletes non-glued room rows last touched before `cutoff_unix`.
    fn sweep(&self, cutoff_unix: i64) -> Result<usize, StoreError>;
    fn stats(&self) -> Result<RelayStats, StoreError>;
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS rooms (
    room_id    BLOB    NOT NULL,
    role       INTEGER NOT NULL,
    address    TEXT    NOT NULL,
    state      TEXT    NOT NULL,
    created_at INTEGER NOT NULL,
    updated_at INTEGER NOT NULL,
    PRIMARY KEY (room_id, role)
);
CREATE TABLE IF NOT EXISTS sessions (
    id            INTEGER PRIMARY KEY AUTOINCREMENT,
    room_id       BLOB    NOT NULL,
    bytes_relayed INTEGER NOT NULL,
    completed     INTEGER NOT NULL,
    ended_at      INTEGER NOT NULL
);
";

/// Single-file SQLite store.
pub struct SqliteStore {
    conn: Mutex<Connection>,
}

impl SqliteStore {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        Self::init(Connection::open(path)?)
    }

    pub fn in_memory() -> Result<Self, StoreError> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self, StoreError> {
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn: Mutex::new(conn),
        })
    }

    fn with<T>(&self, f: impl FnOnce(&Connection) -> rusqlite::Result<T>) -> Result<T, StoreError> {
        let conn = self.conn.lock().expect("store mutex poisoned");
        Ok(f(&conn)?)
    }
}

impl MetadataStore for SqliteStore {
    fn record_join(&self, room_id: &RoomId, role: Role, addr: SocketAddr, at_unix: i64) -> Result<(), StoreError> {
        self.with(|c| {
            c.execute(
                "INSERT OR REPLACE INTO rooms (room_id, role, address, state, created_at, updated_at)
                 VALUES (?1, ?2, ?3, 'waiting', ?4, ?4)",
                params![&room_id[..], role.to_byte(), addr.to_string(), at_unix],
            )
        })?;
        Ok(())
    }

    fn set_state(&self, room_id: &RoomId, state: RoomState) -> Result<(), StoreError> {
        self.with(|c| {
            c.execute(
                "UPDATE rooms SET state = ?2, updated_at = strftime('%s','now') WHERE room_id = ?1",
                params![&room_id[..], state.as_str()],
            )
        })?;
        Ok(())
    }

    fn remove_room(&self, room_id: &RoomId) -> Result<(), StoreError> {
        self.with(|c| c.execute("DELETE FROM rooms WHERE room_id = ?1", params![&room_id[..]]))?;
        Ok(())
    }

    fn record_session(&self, room_id: &RoomId, bytes_relayed: u64, completed: bool, at_unix: i64) -> Result<(), StoreError> {
        self.with(|c| {
            c.execute(
                "INSERT INTO sessions (room_id, bytes_relayed, completed, ended_at) VALUES (?1, ?2, ?3, ?4)",
                params![&room_id[..], bytes_relayed as i64, completed, at_unix],
            )
        })?;
        Ok(())
    }

    fn sweep(&self, cutoff_unix: i64) -> Result<usize, StoreError> {
        self.with(|c| {
            c.execute(
                "DELETE FROM rooms WHERE state != 'glued' AND updated_at < ?1",
                params![cutoff_unix],
            )
        })
    }

    fn stats(&self) -> Result<RelayStats, StoreError> {
        self.with(|c| {
            let rooms_active: i64 = c.query_row(
                "SELECT COUNT(DISTINCT room_id) FROM rooms WHERE state IN ('waiting', 'glued')",
                [],
                |r| r.get(0),
            )?;
            let (bytes, done): (Option<i64>, Option<i64>) = c
                .query_row(
                    "SELECT SUM(bytes_relayed), SUM(completed) FROM sessions",
                    [],
                    |r| Ok((r.get(0)?, r.get(1)?)),
                )
                .optional()?
                .unwrap_or((None, None));
            Ok(RelayStats {
                rooms_active: rooms_active as u64,
                bytes_relayed: bytes.unwrap_or(0) as u64,
                sessions_completed: done.unwrap_or(0) as u64,
            })
        })
    }
}
