//! Tensor manifests: the named, sized and checksummed byte regions that make
//! up one shard of one version, plus the layout used to move tiny tensors in
//! compacted buffers.
//!
//! Entry order is the canonical transfer order. Tensors shorter than the
//! compaction threshold are packed into groups; each group's members occupy
//! a contiguous run of entries (preserving their input order) and the group
//! travels as one unit placed where its first member appeared in the input.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use crate::codec::{require, Decoder, Encoder, Wire};
use crate::digest::{digest64, DIGEST_XXH3_64};
use crate::error::{Error, Result};

pub const DEFAULT_COMPACTION_THRESHOLD: u64 = 2 * 1024 * 1024;
pub const DEFAULT_GROUP_CAPACITY: u64 = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompactionConfig {
    /// Tensors strictly shorter than this are packed.
    pub threshold: u64,
    /// A packed group is closed before it would exceed this many bytes.
    pub group_capacity: u64,
}

impl Default for CompactionConfig {
    fn default() -> Self {
        CompactionConfig {
            threshold: DEFAULT_COMPACTION_THRESHOLD,
            group_capacity: DEFAULT_GROUP_CAPACITY,
        }
    }
}

impl CompactionConfig {
    pub fn with_threshold(threshold: u64) -> Self {
        CompactionConfig {
            threshold,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ManifestEntry {
    pub name: String,
    pub len: u64,
    pub checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedMember {
    pub name: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedGroup {
    pub len: u64,
    pub members: Vec<PackedMember>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorManifest {
    entries: Vec<ManifestEntry>,
    groups: Vec<PackedGroup>,
    total_bytes: u64,
}

/// Ordering and grouping decided from tensor lengths alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactionPlan {
    /// Input index of the tensor at each entry position.
    pub order: Vec<usize>,
    /// Input indices of each packed group's members, in input order.
    pub groups: Vec<Vec<usize>>,
}

impl CompactionPlan {
    pub fn packed_bytes(&self, lengths: &[u64]) -> u64 {
        self.groups.iter().flatten().map(|&i| lengths[i]).sum()
    }
}

/// Groups tiny tensors and fixes the canonical entry order.
pub fn plan_compaction(lengths: &[u64], cfg: CompactionConfig) -> CompactionPlan {
    let mut group_of = vec![None; lengths.len()];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut fill = 0u64;
    for (i, &len) in lengths.iter().enumerate() {
        if len >= cfg.threshold {
            continue;
        }
        let open = groups.last().is_some_and(|g| !g.is_empty() && fill + len <= cfg.group_capacity);
        if !open {
            groups.push(Vec::new());
            fill = 0;
        }
        groups.last_mut().unwrap().push(i);
        fill += len;
        group_of[i] = Some(groups.len() - 1);
    }

    let mut order = Vec::with_capacity(lengths.len());
    let mut emitted = vec![false; groups.len()];
    for (i, g) in group_of.iter().enumerate() {
        match g {
            None => order.push(i),
            Some(g) if !emitted[*g] => {
                emitted[*g] = true;
                order.extend_from_slice(&groups[*g]);
            }
            Some(_) => {}
        }
    }
    CompactionPlan { order, groups }
}

/// Builds a manifest (and canonical entry order) for named tensors.
pub fn build_manifest<N, B>(tensors: &[(N, B)], cfg: CompactionConfig) -> Result<TensorManifest>
where
    N: AsRef<str>,
    B: AsRef<[u8]>,
{
    let described: Vec<(&str, u64, u64)> = tensors
        .iter()
        .map(|(n, b)| (n.as_ref(), b.as_ref().len() as u64, digest64(b.as_ref())))
        .collect();
    manifest_from_digests(&described, cfg)
}

/// Builds a manifest from `(name, length, checksum)` triples without touching
/// any bytes. Used when the digests are already known or the payload is
/// only simulated.
pub fn manifest_from_digests<N: AsRef<str>>(tensors: &[(N, u64, u64)], cfg: CompactionConfig) -> Result<TensorManifest> {
    if cfg.threshold == 0 {
        return Err(Error::invalid("compaction threshold must be positive"));
    }
    let mut seen = HashMap::with_capacity(tensors.len());
    for (i, (name, _, _)) in tensors.iter().enumerate() {
        if seen.insert(name.as_ref(), i).is_some() {
            return Err(Error::invalid(format!("duplicate tensor name {:?}", name.as_ref())));
        }
    }
    let lengths: Vec<u64> = tensors.iter().map(|t| t.1).collect();
    let plan = plan_compaction(&lengths, cfg);

    let entries = plan
        .order
        .iter()
        .map(|&i| ManifestEntry {
            name: tensors[i].0.as_ref().to_owned(),
            len: lengths[i],
            checksum: tensors[i].2,
        })
        .collect();
    let groups = plan
        .groups
        .iter()
        .map(|members| {
            let mut offset = 0;
            let members = members
                .iter()
                .map(|&i| {
                    let m = PackedMember {
                        name: tensors[i].0.as_ref().to_owned(),
                        offset,
                    };
                    offset += lengths[i];
                    m
                })
                .collect();
            PackedGroup { len: offset, members }
        })
        .collect();
    Ok(TensorManifest {
        entries,
        groups,
        total_bytes: lengths.iter().sum(),
    })
}

/// What travels as one transfer unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Tensor(usize),
    Packed(usize),
}

/// One unit of the canonical transfer stream: a large tensor or a whole
/// packed group. `entries` is the run of manifest entries it completes and
/// `offset` its start within the concatenated stream of all units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub kind: UnitKind,
    pub entries: Range<usize>,
    pub offset: u64,
    pub len: u64,
}

impl Unit {
    pub fn end(&self) -> u64 {
        self.offset + self.len
    }
}

impl TensorManifest {
    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn groups(&self) -> &[PackedGroup] {
        &self.groups
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Bytes of staging memory taken by packed groups.
    pub fn packed_bytes(&self) -> u64 {
        self.groups.iter().map(|g| g.len).sum()
    }

    /// Transfer units in stream order.
    pub fn units(&self) -> Vec<Unit> {
        let index: HashMap<&str, usize> = self.entries.iter().enumerate().map(|(i, e)| (e.name.as_str(), i)).collect();
        let mut group_start = BTreeMap::new();
        let mut packed = vec![false; self.entries.len()];
        for (g, group) in self.groups.iter().enumerate() {
            if let Some(first) = group.members.first() {
                let start = index[first.name.as_str()];
                group_start.insert(start, g);
                for m in &group.members {
                    packed[index[m.name.as_str()]] = true;
                }
            }
        }
        let mut units = Vec::new();
        let mut offset = 0;
        let mut i = 0;
        while i < self.entries.len() {
            if let Some(&g) = group_start.get(&i) {
                let n = self.groups[g].members.len();
                let len = self.groups[g].len;
                units.push(Unit {
                    kind: UnitKind::Packed(g),
                    entries: i..i + n,
                    offset,
                    len,
                });
                offset += len;
                i += n;
            } else {
                debug_assert!(!packed[i]);
                let len = self.entries[i].len;
                units.push(Unit {
                    kind: UnitKind::Tensor(i),
                    entries: i..i + 1,
                    offset,
                    len,
                });
                offset += len;
                i += 1;
            }
        }
        units
    }

    /// True when both manifests describe the same names, lengths and
    /// compaction layout, ignoring checksums.
    pub fn same_layout(&self, other: &TensorManifest) -> bool {
        self.total_bytes == other.total_bytes
            && self.groups == other.groups
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.len == b.len)
    }

    /// Returns a copy whose checksums are recomputed from `tensors`, given in
    /// entry order. Used when registered bytes change between publishes.
    pub fn with_checksums<B: AsRef<[u8]>>(&self, tensors: &[B]) -> Result<TensorManifest> {
        if tensors.len() != self.entries.len() {
            return Err(Error::invalid("tensor count does not match manifest"));
        }
        let mut out = self.clone();
        for (entry, data) in out.entries.iter_mut().zip(tensors) {
            let data = data.as_ref();
            if data.len() as u64 != entry.len {
                return Err(Error::invalid(format!("tensor {:?} changed length", entry.name)));
            }
            entry.checksum = digest64(data);
        }
        Ok(out)
    }

    /// Digest of the canonical encoding; equal manifests agree on it.
    pub fn digest(&self) -> u64 {
        digest64(&self.to_bytes())
    }

    /// Checks the structural invariants; `cfg` additionally checks that
    /// membership follows the compaction threshold.
    pub fn validate(&self, cfg: Option<CompactionConfig>) -> Result<()> {
        let mut index = HashMap::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            if index.insert(e.name.as_str(), i).is_some() {
                return Err(Error::invalid(format!("duplicate tensor name {:?}", e.name)));
            }
        }
        let total: u64 = self.entries.iter().map(|e| e.len).sum();
        if total != self.total_bytes {
            return Err(Error::invalid("total_bytes does not match entries"));
        }
        let mut membership = vec![false; self.entries.len()];
        for (g, group) in self.groups.iter().enumerate() {
            if group.members.is_empty() {
                return Err(Error::invalid(format!("packed group {g} is empty")));
            }
            let mut expect_offset = 0;
            let mut prev_pos: Option<usize> = None;
            for m in &group.members {
                let pos = *index
                    .get(m.name.as_str())
                    .ok_or_else(|| Error::invalid(format!("packed member {:?} not in manifest", m.name)))?;
                if membership[pos] {
                    return Err(Error::invalid(format!("{:?} packed twice", m.name)));
                }
                membership[pos] = true;
                if m.offset != expect_offset {
                    return Err(Error::invalid(format!("packed group {g} offsets not contiguous")));
                }
                if prev_pos.is_some_and(|p| p + 1 != pos) {
                    return Err(Error::invalid(format!("packed group {g} members not contiguous")));
                }
                prev_pos = Some(pos);
                expect_offset += self.entries[pos].len;
            }
            if expect_offset != group.len {
                return Err(Error::invalid(format!("packed group {g} length mismatch")));
            }
        }
        if let Some(cfg) = cfg {
            for (e, packed) in self.entries.iter().zip(&membership) {
                if (e.len < cfg.threshold) != *packed {
                    return Err(Error::invalid(format!("{:?} violates the compaction threshold", e.name)));
                }
            }
        }
        Ok(())
    }
}

/// Copies tiny tensors (given in entry order) into their packed buffers.
pub fn pack<B: AsRef<[u8]>>(manifest: &TensorManifest, tensors: &[B]) -> Vec<Vec<u8>> {
    manifest
        .groups
        .iter()
        .map(|group| {
            let mut buf = Vec::with_capacity(group.len as usize);
            for m in &group.members {
                let pos = manifest.position(&m.name).expect("validated manifest");
                buf.extend_from_slice(tensors[pos].as_ref());
            }
            buf
        })
        .collect()
}

/// Copies a packed buffer back into its member tensors (entry order).
pub fn unpack_group(manifest: &TensorManifest, group: usize, packed: &[u8], tensors: &mut [Vec<u8>]) {
    let group = &manifest.groups[group];
    for m in &group.members {
        let pos = manifest.position(&m.name).expect("validated manifest");
        let len = manifest.entries[pos].len as usize;
        let start = m.offset as usize;
        tensors[pos].clear();
        tensors[pos].extend_from_slice(&packed[start..start + len]);
    }
}

mod tag {
    pub const ALGORITHM: u8 = 1;
    pub const ENTRY: u8 = 2;
    pub const GROUP: u8 = 3;
    pub const TOTAL: u8 = 4;

    pub const NAME: u8 = 1;
    pub const LEN: u8 = 2;
    pub const CHECKSUM: u8 = 3;

    pub const MEMBER: u8 = 2;
    pub const OFFSET: u8 = 2;
}

impl Wire for TensorManifest {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(tag::ALGORITHM, DIGEST_XXH3_64 as u64);
        for e in &self.entries {
            enc.nested(tag::ENTRY, |f| {
                f.str(tag::NAME, &e.name).u64(tag::LEN, e.len).u64(tag::CHECKSUM, e.checksum);
            });
        }
        for g in &self.groups {
            enc.nested(tag::GROUP, |f| {
                f.u64(1, g.len);
                for m in &g.members {
                    f.nested(tag::MEMBER, |mf| {
                        mf.str(tag::NAME, &m.name).u64(tag::OFFSET, m.offset);
                    });
                }
            });
        }
        enc.u64(tag::TOTAL, self.total_bytes);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let mut algorithm = None;
        let mut entries = Vec::new();
        let mut groups = Vec::new();
        let mut total = None;
        while let Some(field) = dec.next_field()? {
            match field.tag {
                tag::ALGORITHM => algorithm = Some(field.u64()?),
                tag::ENTRY => {
                    let (mut name, mut len, mut checksum) = (None, None, None);
                    for f in field.decoder().fields()? {
                        match f.tag {
                            tag::NAME => name = Some(f.string()?),
                            tag::LEN => len = Some(f.u64()?),
                            tag::CHECKSUM => checksum = Some(f.u64()?),
                            _ => {}
                        }
                    }
                    entries.push(ManifestEntry {
                        name: require(name, "entry.name")?,
                        len: require(len, "entry.len")?,
                        checksum: require(checksum, "entry.checksum")?,
                    });
                }
                tag::GROUP => {
                    let mut len = None;
                    let mut members = Vec::new();
                    for f in field.decoder().fields()? {
                        match f.tag {
                            1 => len = Some(f.u64()?),
                            tag::MEMBER => {
                                let (mut name, mut offset) = (None, None);
                                for mf in f.decoder().fields()? {
                                    match mf.tag {
                                        tag::NAME => name = Some(mf.string()?),
                                        tag::OFFSET => offset = Some(mf.u64()?),
                                        _ => {}
                                    }
                                }
                                members.push(PackedMember {
                                    name: require(name, "member.name")?,
                                    offset: require(offset, "member.offset")?,
                                });
                            }
                            _ => {}
                        }
                    }
                    groups.push(PackedGroup {
                        len: require(len, "group.len")?,
                        members,
                    });
                }
                tag::TOTAL => total = Some(field.u64()?),
                _ => {}
            }
        }
        if algorithm != Some(DIGEST_XXH3_64 as u64) {
            return Err(Error::decode(format!("unsupported digest algorithm {algorithm:?}")));
        }
        let manifest = TensorManifest {
            entries,
            groups,
            total_bytes: require(total, "total_bytes")?,
        };
        manifest.validate(None).map_err(|e| Error::decode(e.to_string()))?;
        Ok(manifest)
    }
}
