use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use ros_core::VersionId;

use crate::{Regions, TransferError};

/// Which of a handle's buffers a slot holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    /// The registered regions themselves.
    Main,
    /// A host copy kept after unpublish to satisfy retention.
    Offload,
    /// A buffer filled from another datacenter ahead of an update.
    Seed,
}

#[derive(Debug, Clone)]
pub struct Slot {
    pub version: Option<VersionId>,
    pub regions: Regions,
    /// Entries held, always at a unit boundary.
    pub progress: usize,
    /// Whether peers may read this slot.
    pub serving: bool,
}

impl Slot {
    pub fn new(regions: Regions) -> Self {
        Slot {
            version: None,
            regions,
            progress: 0,
            serving: false,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.progress == self.regions.manifest().len()
    }
}

/// The buffers one shard handle exposes to peers.
#[derive(Debug)]
pub struct ShardStore {
    shard_idx: u32,
    slots: RwLock<BTreeMap<Role, Slot>>,
}

/// Outcome of reading one unit.
pub(crate) enum UnitRead<R> {
    Read(Range<usize>, R),
    /// The next unit is not held yet; carries the current progress.
    Behind(usize),
}

impl ShardStore {
    pub fn new(shard_idx: u32) -> Self {
        ShardStore {
            shard_idx,
            slots: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn shard_idx(&self) -> u32 {
        self.shard_idx
    }

    pub fn read(&self) -> RwLockReadGuard<'_, BTreeMap<Role, Slot>> {
        self.slots.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, BTreeMap<Role, Slot>> {
        self.slots.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn install(&self, role: Role, slot: Slot) -> Option<Slot> {
        self.write().insert(role, slot)
    }

    pub fn remove(&self, role: Role) -> Option<Slot> {
        self.write().remove(&role)
    }

    pub fn with<R>(&self, role: Role, f: impl FnOnce(&Slot) -> R) -> Option<R> {
        self.read().get(&role).map(f)
    }

    pub fn with_mut<R>(&self, role: Role, f: impl FnOnce(&mut Slot) -> R) -> Option<R> {
        self.write().get_mut(&role).map(f)
    }

    fn serving(slots: &BTreeMap<Role, Slot>, version: VersionId) -> Option<&Slot> {
        slots.values().find(|s| s.serving && s.version == Some(version))
    }

    /// Entries of `version` this store can hand out.
    pub fn progress(&self, version: VersionId, shard_idx: u32) -> Result<usize, TransferError> {
        if shard_idx != self.shard_idx {
            return Err(TransferError::NotServing);
        }
        let slots = self.read();
        Self::serving(&slots, version).map(|s| s.progress).ok_or(TransferError::NotServing)
    }

    /// Reads the unit starting at `entry`, handing its bytes to `f` while
    /// the store is locked.
    pub(crate) fn read_unit<R>(
        &self,
        version: VersionId,
        shard_idx: u32,
        entry: usize,
        f: impl FnOnce(Range<usize>, &[u8]) -> R,
    ) -> Result<UnitRead<R>, TransferError> {
        if shard_idx != self.shard_idx {
            return Err(TransferError::NotServing);
        }
        let slots = self.read();
        let slot = Self::serving(&slots, version).ok_or(TransferError::NotServing)?;
        let unit = slot
            .regions
            .unit_at(entry)
            .ok_or_else(|| TransferError::Protocol(format!("entry {entry} is not at a unit boundary")))?;
        let entries = slot.regions.units()[unit].entries.clone();
        if entries.end > slot.progress {
            return Ok(UnitRead::Behind(slot.progress));
        }
        let r = f(entries.clone(), slot.regions.unit_bytes(unit));
        Ok(UnitRead::Read(entries, r))
    }
}
