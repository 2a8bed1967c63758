//! Reference server: tracks which workers hold which tensor versions, picks
//! transfer sources, and enforces group consistency, retention and failure
//! handling. It never touches tensor bytes.

mod config;
mod event;
mod machine;
pub mod runtime;

pub use config::{Config, ConfigError, ServerConfig};
pub use event::Event;
pub use machine::{ClientId, Lifecycle, Outbound, ReferenceServer, ReplicaKind, ReplicaView, ShardState};
