//! Progress of one shard fill, independent of how bytes arrive.

use std::ops::Range;

use ros_core::{manifest::Unit, SourceAssignment};
use ros_transfer::{unit_at, Endpoint, PullRequest, Regions, TransferError};

use crate::ClientError;

/// Tracks which units of an assigned version are held and verified.
///
/// Entries are accepted strictly in order, one unit at a time, so the held
/// prefix is always at a unit boundary and can be served to peers as it
/// grows. A reassignment keeps the prefix: every source of a version holds
/// identical bytes.
#[derive(Debug, Clone)]
pub struct FillJob {
    assignment: SourceAssignment,
    units: Vec<Unit>,
    next: usize,
    corrupt: Option<usize>,
    corrupt_reports: u32,
}

impl FillJob {
    pub fn new(assignment: SourceAssignment) -> Self {
        let units = assignment.manifest.units();
        FillJob {
            assignment,
            units,
            next: 0,
            corrupt: None,
            corrupt_reports: 0,
        }
    }

    pub fn assignment(&self) -> &SourceAssignment {
        &self.assignment
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    /// Entries held so far.
    pub fn progress(&self) -> usize {
        self.units.get(self.next).map_or(self.assignment.manifest.len(), |u| u.entries.start)
    }

    /// Units held so far.
    pub fn units_done(&self) -> usize {
        self.next
    }

    pub fn bytes_done(&self) -> u64 {
        self.units[..self.next].iter().map(|u| u.len).sum()
    }

    pub fn is_done(&self) -> bool {
        self.next == self.units.len()
    }

    pub fn endpoint(&self) -> Result<Endpoint, ClientError> {
        self.assignment
            .source_endpoint
            .parse()
            .map_err(|_| ClientError::Transfer(TransferError::BadEndpoint(self.assignment.source_endpoint.clone())))
    }

    /// Pull request for everything not yet held.
    pub fn request(&self) -> PullRequest {
        PullRequest {
            version: self.assignment.version,
            shard_idx: self.assignment.shard_idx,
            entries: self.progress()..self.assignment.manifest.len(),
        }
    }

    /// Verifies one delivered unit and writes it into `regions`. A checksum
    /// failure is remembered (see [`FillJob::take_corrupt`]) and aborts the
    /// pull with a protocol error.
    pub fn accept(&mut self, regions: &mut Regions, entries: Range<usize>, bytes: &[u8]) -> Result<(), TransferError> {
        let unit = self.expect(&entries)?;
        if let Err(entry) = regions.verify(unit, bytes) {
            self.corrupt = Some(entry);
            return Err(TransferError::Protocol(format!("entry {entry} failed its checksum")));
        }
        regions.write_unit(unit, bytes);
        self.next += 1;
        Ok(())
    }

    /// Records delivery of a unit whose bytes are not materialized.
    pub fn accept_virtual(&mut self, entries: Range<usize>) -> Result<(), TransferError> {
        self.expect(&entries)?;
        self.next += 1;
        Ok(())
    }

    fn expect(&self, entries: &Range<usize>) -> Result<usize, TransferError> {
        match unit_at(&self.units, entries.start) {
            Some(u) if u == self.next && self.units[u].entries == *entries => Ok(u),
            _ => Err(TransferError::Protocol(format!(
                "got entries {entries:?}, expected the unit at entry {}",
                self.progress()
            ))),
        }
    }

    /// Takes the entry of the last checksum failure, if any.
    pub fn take_corrupt(&mut self) -> Option<usize> {
        self.corrupt.take()
    }

    /// Counts a corrupt delivery; errors once `budget` sources have
    /// delivered bad bytes.
    pub fn note_corrupt(&mut self, entry: usize, budget: u32) -> Result<(), ClientError> {
        self.corrupt_reports += 1;
        if self.corrupt_reports >= budget {
            return Err(ClientError::Checksum {
                entry,
                attempts: self.corrupt_reports,
            });
        }
        Ok(())
    }

    /// Continues from a new source, keeping the verified prefix.
    pub fn reassign(&mut self, assignment: SourceAssignment) {
        debug_assert_eq!(assignment.version, self.assignment.version);
        self.assignment = assignment;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ros_core::{build_manifest, CompactionConfig, Token, VersionId};

    fn source() -> Regions {
        let tensors: Vec<(String, Vec<u8>)> = (0..6).map(|i| (format!("t{i}"), vec![i as u8; 4 + i * 10])).collect();
        let m = build_manifest(&tensors, CompactionConfig::with_threshold(16)).unwrap();
        let bytes = m
            .entries()
            .iter()
            .map(|e| tensors.iter().find(|(n, _)| *n == e.name).unwrap().1.clone())
            .collect();
        Regions::new(m, bytes).unwrap()
    }

    fn assignment(m: &ros_core::TensorManifest, from: &str) -> SourceAssignment {
        SourceAssignment {
            version: VersionId(2),
            shard_idx: 0,
            source_replica: from.into(),
            source_endpoint: format!("mem://{from}/k"),
            source_complete: true,
            cross_dc: false,
            manifest: m.clone(),
            op_seq: 1,
            token: Token(1),
        }
    }

    #[test]
    fn accepts_units_in_order_and_resumes_after_reassign() {
        let src = source();
        let m = src.manifest().clone();
        let mut dst = Regions::zeroed(m.clone());
        let mut job = FillJob::new(assignment(&m, "a"));
        let units = job.units().to_vec();
        assert!(units.len() >= 3);
        job.accept(&mut dst, units[0].entries.clone(), src.unit_bytes(0)).unwrap();
        assert!(job.accept(&mut dst, units[2].entries.clone(), src.unit_bytes(2)).is_err());

        let mut bad = src.unit_bytes(1).to_vec();
        bad[0] ^= 1;
        assert!(job.accept(&mut dst, units[1].entries.clone(), &bad).is_err());
        let entry = job.take_corrupt().unwrap();
        job.note_corrupt(entry, 2).unwrap();
        assert!(job.note_corrupt(entry, 2).is_err());

        job.reassign(assignment(&m, "b"));
        assert_eq!(job.request().entries.start, units[1].entries.start);
        for (i, u) in units.iter().enumerate().skip(1) {
            job.accept(&mut dst, u.entries.clone(), src.unit_bytes(i)).unwrap();
        }
        assert!(job.is_done());
        assert_eq!(job.progress(), m.len());
        assert_eq!(dst.tensors(), src.tensors());
        assert_eq!(job.bytes_done(), m.total_bytes());
    }
}
