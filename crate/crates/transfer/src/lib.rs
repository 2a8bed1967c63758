//! Bulk-data plane of reference-oriented storage.
//!
//! Receivers pull; sources are passive. A source process exposes its shard
//! stores through a [`PeerService`], and a [`Transport`] reads from a remote
//! service given an [`Endpoint`]. Reads are prefix-limited: a source only
//! hands out whole units whose entries it already holds.

mod endpoint;
mod mem;
mod regions;
mod service;
pub mod sim;
mod store;
mod stream;
mod transport;
pub mod wire;

pub use endpoint::{Capabilities, Endpoint, TransportKind};
pub use mem::{MemNetwork, MemTransport};
pub use regions::{unit_at, verify_unit, Regions};
pub use service::{Faults, PartsSink, PeerService, StagingPool, STAGING_REGION};
pub use store::{Role, ShardStore, Slot};
pub use stream::{StageMode, StreamServer, StreamTransport};
pub use transport::{PullRequest, PullStatus, Transport, UnitSink};

use std::time::Duration;

/// Default time a receiver waits on a silent source before giving up.
pub const DEFAULT_PULL_TIMEOUT: Duration = Duration::from_secs(4);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransferError {
    #[error("malformed endpoint {0:?}")]
    BadEndpoint(String),
    #[error("peer unreachable: {0}")]
    Unreachable(String),
    #[error("peer did not answer in time")]
    Timeout,
    #[error("peer is not serving that version")]
    NotServing,
    #[error("data-plane protocol error: {0}")]
    Protocol(String),
}

impl TransferError {
    /// True when the source itself should be reported as failed.
    pub fn is_source_failure(&self) -> bool {
        matches!(self, TransferError::Unreachable(_) | TransferError::Timeout)
    }
}
