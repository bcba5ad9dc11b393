//! Password-authenticated, end-to-end encrypted file transfer through a
//! rendezvous relay.

pub mod bench;
pub mod group;
pub mod pake;
pub mod passphrase;
pub mod relay;
pub mod transfer;
pub mod transport;
pub mod wire;

pub use group::{Group, GroupParams, Ristretto255, ToyGroup};
pub use pake::{Role, SessionKeys};
pub use transfer::{receive_file, send_file, ChannelMode, TransferError, TransferReport};
pub use transport::{establish, Session, TransportConfig, TransportError};

/// Group used by the networked protocol.
pub type ProductionGroup = Ristretto255;
