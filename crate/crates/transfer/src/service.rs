use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, RwLock};

use ros_core::VersionId;

use crate::store::UnitRead;
use crate::{PullRequest, PullStatus, ShardStore, TransferError};

/// Size of one pre-allocated staging region.
pub const STAGING_REGION: usize = 64 * 1024 * 1024;

/// Receives each unit range as the slices it is stored in.
pub type PartsSink<'a> = dyn FnMut(Range<usize>, &[&[u8]]) -> Result<(), TransferError> + 'a;

/// Knobs for breaking a source on purpose.
#[derive(Debug, Default)]
pub struct Faults {
    corrupt: AtomicU32,
    down: AtomicBool,
}

impl Faults {
    /// Flips one bit in each of the next `n` units served.
    pub fn corrupt_next(&self, n: u32) {
        self.corrupt.store(n, Ordering::SeqCst);
    }

    /// A down service refuses everything as if the process were gone.
    pub fn set_down(&self, down: bool) {
        self.down.store(down, Ordering::SeqCst);
    }

    pub fn is_down(&self) -> bool {
        self.down.load(Ordering::SeqCst)
    }

    fn take_corruption(&self) -> bool {
        self.corrupt
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
    }
}

/// Fixed-size staging regions that units are copied into before sending.
#[derive(Debug)]
pub struct StagingPool {
    region: usize,
    regions: Vec<Box<[u8]>>,
}

impl StagingPool {
    pub fn new(region: usize) -> Self {
        assert!(region > 0);
        StagingPool {
            region,
            regions: Vec::new(),
        }
    }

    /// Copies `bytes` into as many regions as needed, allocating lazily.
    pub fn stage(&mut self, bytes: &[u8]) -> usize {
        let need = bytes.len().div_ceil(self.region);
        while self.regions.len() < need {
            self.regions.push(vec![0u8; self.region].into_boxed_slice());
        }
        for (chunk, region) in bytes.chunks(self.region).zip(&mut self.regions) {
            region[..chunk.len()].copy_from_slice(chunk);
        }
        bytes.len()
    }

    /// The first `len` staged bytes as region-sized pieces.
    pub fn pieces(&self, len: usize) -> Vec<&[u8]> {
        let mut out = Vec::new();
        let mut left = len;
        for r in &self.regions {
            if left == 0 {
                break;
            }
            let n = left.min(self.region);
            out.push(&r[..n]);
            left -= n;
        }
        out
    }

    fn flip_bit(&mut self, at: usize) {
        if let Some(r) = self.regions.get_mut(at / self.region) {
            r[at % self.region] ^= 0x10;
        }
    }

    pub fn allocated(&self) -> usize {
        self.regions.len() * self.region
    }
}

/// The shard stores a process serves to peers, keyed by endpoint key.
#[derive(Debug, Default)]
pub struct PeerService {
    stores: RwLock<BTreeMap<String, Arc<ShardStore>>>,
    faults: Faults,
}

impl PeerService {
    pub fn new() -> Arc<Self> {
        Arc::new(PeerService::default())
    }

    pub fn attach(&self, key: impl Into<String>, store: Arc<ShardStore>) {
        self.stores.write().unwrap_or_else(|e| e.into_inner()).insert(key.into(), store);
    }

    pub fn detach(&self, key: &str) {
        self.stores.write().unwrap_or_else(|e| e.into_inner()).remove(key);
    }

    pub fn faults(&self) -> &Faults {
        &self.faults
    }

    fn store(&self, key: &str) -> Result<Arc<ShardStore>, TransferError> {
        if self.faults.is_down() {
            return Err(TransferError::Unreachable("service is down".into()));
        }
        self.stores
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(key)
            .cloned()
            .ok_or(TransferError::NotServing)
    }

    pub fn progress(&self, key: &str, version: VersionId, shard_idx: u32) -> Result<usize, TransferError> {
        self.store(key)?.progress(version, shard_idx)
    }

    /// Serves `req` unit by unit. With a staging pool each unit is copied
    /// out under the store lock and handed to `sink` after releasing it;
    /// without one `sink` sees the registered bytes directly.
    pub fn pull(
        &self,
        key: &str,
        req: &PullRequest,
        mut staging: Option<&mut StagingPool>,
        sink: &mut PartsSink<'_>,
    ) -> Result<PullStatus, TransferError> {
        let store = self.store(key)?;
        let mut entry = req.entries.start;
        while entry < req.entries.end {
            if self.faults.is_down() {
                return Err(TransferError::Unreachable("service is down".into()));
            }
            let corrupt = self.faults.take_corruption();
            let mut staged = None;
            let read = store.read_unit(req.version, req.shard_idx, entry, |entries, bytes| {
                if entries.end > req.entries.end {
                    return Err(TransferError::Protocol("range ends inside a packed group".into()));
                }
                match staging.as_deref_mut() {
                    Some(pool) => {
                        let n = pool.stage(bytes);
                        if corrupt {
                            pool.flip_bit(n / 2);
                        }
                        staged = Some(n);
                    }
                    None if corrupt => {
                        let mut copy = bytes.to_vec();
                        flip_bit(&mut copy);
                        sink(entries.clone(), &[&copy])?;
                    }
                    // Direct mode: the sink runs while the store is locked.
                    None => sink(entries.clone(), &[bytes])?,
                }
                Ok(())
            })?;
            let entries = match read {
                UnitRead::Behind(progress) => return Ok(PullStatus::RetryAfterProgress { progress }),
                UnitRead::Read(entries, r) => {
                    r?;
                    entries
                }
            };
            if let (Some(n), Some(pool)) = (staged, staging.as_deref()) {
                sink(entries.clone(), &pool.pieces(n))?;
            }
            entry = entries.end;
        }
        Ok(PullStatus::Done)
    }
}

fn flip_bit(bytes: &mut [u8]) {
    if let Some(b) = bytes.get_mut(bytes.len() / 2) {
        *b ^= 0x10;
    }
}
