use ros_core::digest64;
use ros_core::manifest::{pack, unpack_group, Unit, UnitKind};
use ros_core::TensorManifest;

use crate::TransferError;

/// The byte regions of one shard: a buffer per manifest entry plus the
/// staging buffers of its packed groups.
///
/// Large tensors are served and filled in place. Packed groups are served
/// from their staging buffer, which is refreshed from the member tensors by
/// [`Regions::repack`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Regions {
    manifest: TensorManifest,
    units: Vec<Unit>,
    tensors: Vec<Vec<u8>>,
    packed: Vec<Vec<u8>>,
}

impl Regions {
    /// Takes ownership of `tensors`, given in manifest entry order.
    pub fn new(manifest: TensorManifest, tensors: Vec<Vec<u8>>) -> Result<Self, TransferError> {
        if tensors.len() != manifest.len() {
            return Err(TransferError::Protocol(format!(
                "{} buffers for {} entries",
                tensors.len(),
                manifest.len()
            )));
        }
        for (e, t) in manifest.entries().iter().zip(&tensors) {
            if t.len() as u64 != e.len {
                return Err(TransferError::Protocol(format!("buffer for {:?} has the wrong length", e.name)));
            }
        }
        let packed = pack(&manifest, &tensors);
        let units = manifest.units();
        Ok(Regions {
            manifest,
            units,
            tensors,
            packed,
        })
    }

    /// Zero-filled regions laid out for `manifest`, ready to receive.
    pub fn zeroed(manifest: TensorManifest) -> Self {
        let tensors = manifest.entries().iter().map(|e| vec![0u8; e.len as usize]).collect();
        let packed = manifest.groups().iter().map(|g| vec![0u8; g.len as usize]).collect();
        let units = manifest.units();
        Regions {
            manifest,
            units,
            tensors,
            packed,
        }
    }

    pub fn manifest(&self) -> &TensorManifest {
        &self.manifest
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn tensors(&self) -> &[Vec<u8>] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[u8]> {
        self.manifest.position(name).map(|i| self.tensors[i].as_slice())
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [u8]> {
        self.manifest.position(name).map(|i| self.tensors[i].as_mut_slice())
    }

    pub fn into_tensors(self) -> Vec<Vec<u8>> {
        self.tensors
    }

    /// Copies tiny tensors into their staging buffers and recomputes every
    /// checksum from the current bytes.
    pub fn repack(&mut self) {
        self.packed = pack(&self.manifest, &self.tensors);
        self.manifest = self.manifest.with_checksums(&self.tensors).expect("lengths are fixed at construction");
    }

    /// Adopts another manifest with the same layout (e.g. a peer's version).
    pub fn set_manifest(&mut self, manifest: TensorManifest) -> Result<(), TransferError> {
        if !self.manifest.same_layout(&manifest) {
            return Err(TransferError::Protocol("manifest layout differs from registered regions".into()));
        }
        self.manifest = manifest;
        Ok(())
    }

    pub fn unit_bytes(&self, unit: usize) -> &[u8] {
        match self.units[unit].kind {
            UnitKind::Tensor(i) => &self.tensors[i],
            UnitKind::Packed(g) => &self.packed[g],
        }
    }

    /// Index of the unit that starts at entry `entry`, if any.
    pub fn unit_at(&self, entry: usize) -> Option<usize> {
        unit_at(&self.units, entry)
    }

    /// Checks `bytes` against the manifest digests of `unit`'s entries and
    /// returns the first mismatching entry.
    pub fn verify(&self, unit: usize, bytes: &[u8]) -> Result<(), usize> {
        verify_unit(&self.manifest, &self.units[unit], bytes)
    }

    /// Stores a received unit. The caller verifies first.
    pub fn write_unit(&mut self, unit: usize, bytes: &[u8]) {
        match self.units[unit].kind {
            UnitKind::Tensor(i) => self.tensors[i].copy_from_slice(bytes),
            UnitKind::Packed(g) => {
                self.packed[g].copy_from_slice(bytes);
                unpack_group(&self.manifest, g, bytes, &mut self.tensors);
            }
        }
    }

    /// Digest over all tensors in entry order; equal digests mean equal
    /// buffers for practical purposes.
    pub fn fingerprint(&self) -> u64 {
        let mut d = ros_core::Digester::new();
        for t in &self.tensors {
            d.update(t);
        }
        d.finish()
    }
}

pub fn unit_at(units: &[Unit], entry: usize) -> Option<usize> {
    units.binary_search_by_key(&entry, |u| u.entries.start).ok()
}

/// Verifies one unit's bytes against the manifest.
pub fn verify_unit(manifest: &TensorManifest, unit: &Unit, bytes: &[u8]) -> Result<(), usize> {
    if bytes.len() as u64 != unit.len {
        return Err(unit.entries.start);
    }
    match unit.kind {
        UnitKind::Tensor(i) => {
            if digest64(bytes) != manifest.entries()[i].checksum {
                return Err(i);
            }
        }
        UnitKind::Packed(g) => {
            for m in &manifest.groups()[g].members {
                let i = manifest.position(&m.name).expect("member is an entry");
                let len = manifest.entries()[i].len as usize;
                let start = m.offset as usize;
                if digest64(&bytes[start..start + len]) != manifest.entries()[i].checksum {
                    return Err(i);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ros_core::{build_manifest, CompactionConfig};

    fn sample() -> (TensorManifest, Vec<Vec<u8>>) {
        let tensors: Vec<(String, Vec<u8>)> = vec![
            ("big".into(), vec![1; 32]),
            ("t1".into(), vec![2; 3]),
            ("t2".into(), vec![3; 5]),
            ("big2".into(), vec![4; 16]),
        ];
        let m = build_manifest(&tensors, CompactionConfig::with_threshold(8)).unwrap();
        let ordered = m
            .entries()
            .iter()
            .map(|e| tensors.iter().find(|(n, _)| *n == e.name).unwrap().1.clone())
            .collect();
        (m, ordered)
    }

    #[test]
    fn units_copy_between_regions() {
        let (m, tensors) = sample();
        let src = Regions::new(m.clone(), tensors).unwrap();
        let mut dst = Regions::zeroed(m);
        for u in 0..src.units().len() {
            let bytes = src.unit_bytes(u).to_vec();
            assert_eq!(dst.verify(u, &bytes), Ok(()));
            dst.write_unit(u, &bytes);
        }
        assert_eq!(dst.tensors(), src.tensors());
        assert_eq!(dst.fingerprint(), src.fingerprint());
    }

    #[test]
    fn flipped_bit_names_the_entry() {
        let (m, tensors) = sample();
        let src = Regions::new(m, tensors).unwrap();
        let packed = src.units().iter().position(|u| matches!(u.kind, UnitKind::Packed(_))).unwrap();
        let mut bytes = src.unit_bytes(packed).to_vec();
        bytes[4] ^= 1;
        let bad = src.verify(packed, &bytes).unwrap_err();
        assert_eq!(src.manifest().entries()[bad].name, "t2");
    }

    #[test]
    fn repack_tracks_mutation() {
        let (m, tensors) = sample();
        let mut r = Regions::new(m, tensors).unwrap();
        let before = r.manifest().clone();
        r.tensor_mut("t1").unwrap()[0] = 9;
        r.repack();
        assert_ne!(r.manifest(), &before);
        assert!(r.manifest().same_layout(&before));
        let packed = r.units().iter().position(|u| matches!(u.kind, UnitKind::Packed(_))).unwrap();
        assert_eq!(r.unit_bytes(packed)[0], 9);
        assert_eq!(r.verify(packed, r.unit_bytes(packed)), Ok(()));
    }
}
