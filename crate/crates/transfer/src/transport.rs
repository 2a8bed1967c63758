use std::ops::Range;

use ros_core::VersionId;

use crate::{Endpoint, TransferError};

/// Receives each unit range with its bytes as it arrives.
pub type UnitSink<'a> = dyn FnMut(Range<usize>, &[u8]) -> Result<(), TransferError> + 'a;

/// A prefix-limited range read of one shard: entries `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PullRequest {
    pub version: VersionId,
    pub shard_idx: u32,
    pub entries: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PullStatus {
    /// Every requested entry was delivered.
    Done,
    /// The source stopped at its progress; ask again later.
    RetryAfterProgress { progress: usize },
}

pub trait Transport: Send + Sync {
    /// Entries of `version` the source at `ep` currently holds.
    fn query_progress(&self, ep: &Endpoint, version: VersionId, shard_idx: u32) -> Result<usize, TransferError>;

    /// Streams whole units in order to `sink` as `(entries, bytes)`.
    fn pull(
        &self,
        ep: &Endpoint,
        req: &PullRequest,
        sink: &mut UnitSink<'_>,
    ) -> Result<PullStatus, TransferError>;
}
