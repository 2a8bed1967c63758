use std::collections::BTreeSet;

use proptest::prelude::*;
use ros_core::codec::Wire;
use ros_core::manifest::{pack, unpack_group, UnitKind};
use ros_core::{build_manifest, resolve_version, CompactionConfig, TensorManifest, VersionId, VersionSpec};

fn tensors() -> impl Strategy<Value = Vec<(String, Vec<u8>)>> {
    prop::collection::vec(0usize..200, 1..40).prop_flat_map(|lens| {
        let n = lens.len();
        (Just(lens), any::<u64>()).prop_map(move |(lens, seed)| {
            (0..n)
                .map(|i| {
                    let bytes = (0..lens[i]).map(|j| (seed.wrapping_mul(i as u64 + 7).wrapping_add(j as u64) % 251) as u8).collect();
                    (format!("t{i}"), bytes)
                })
                .collect()
        })
    })
}

fn cfg() -> impl Strategy<Value = CompactionConfig> {
    (1u64..120, 1u64..600).prop_map(|(threshold, cap)| CompactionConfig {
        threshold,
        group_capacity: cap,
    })
}

/// Tensor bytes in manifest entry order.
fn in_entry_order(m: &TensorManifest, input: &[(String, Vec<u8>)]) -> Vec<Vec<u8>> {
    m.entries()
        .iter()
        .map(|e| input.iter().find(|(n, _)| *n == e.name).unwrap().1.clone())
        .collect()
}

proptest! {
    #[test]
    fn pack_then_unpack_restores_bytes(input in tensors(), cfg in cfg()) {
        let m = build_manifest(&input, cfg).unwrap();
        m.validate(Some(cfg)).unwrap();
        let ordered = in_entry_order(&m, &input);
        let packed = pack(&m, &ordered);
        let mut restored: Vec<Vec<u8>> = ordered.iter().map(|t| vec![0xEE; t.len()]).collect();
        for (g, buf) in packed.iter().enumerate() {
            prop_assert_eq!(buf.len() as u64, m.groups()[g].len);
            unpack_group(&m, g, buf, &mut restored);
        }
        for unit in m.units() {
            if let UnitKind::Tensor(i) = unit.kind {
                restored[i] = ordered[i].clone();
            }
        }
        prop_assert_eq!(restored, ordered);
    }

    #[test]
    fn rebuild_from_unpacked_bytes_is_identical(input in tensors(), cfg in cfg()) {
        let m = build_manifest(&input, cfg).unwrap();
        let ordered = in_entry_order(&m, &input);
        let named: Vec<(String, Vec<u8>)> = m.entries().iter().map(|e| e.name.clone()).zip(ordered).collect();
        let again = build_manifest(&named, cfg).unwrap();
        prop_assert_eq!(again.to_bytes(), m.to_bytes());
    }

    #[test]
    fn units_tile_the_stream(input in tensors(), cfg in cfg()) {
        let m = build_manifest(&input, cfg).unwrap();
        let units = m.units();
        let mut next_entry = 0;
        let mut offset = 0;
        for u in &units {
            prop_assert_eq!(u.entries.start, next_entry);
            prop_assert_eq!(u.offset, offset);
            next_entry = u.entries.end;
            offset = u.end();
        }
        prop_assert_eq!(next_entry, m.len());
        prop_assert_eq!(offset, m.total_bytes());
    }

    #[test]
    fn manifest_encoding_round_trips(input in tensors(), cfg in cfg()) {
        let m = build_manifest(&input, cfg).unwrap();
        let back = TensorManifest::from_bytes(&m.to_bytes()).unwrap();
        prop_assert_eq!(back.digest(), m.digest());
        prop_assert_eq!(back, m);
    }

    #[test]
    fn resolution_ignores_insertion_order(mut versions in prop::collection::vec(0u64..50, 0..12), k in 0u32..6, abs in 0u64..50, seed in any::<u64>()) {
        let set: BTreeSet<u64> = versions.iter().copied().collect();
        let expect_rel = set.iter().rev().nth(k as usize).copied().map(VersionId);
        let expect_abs = set.contains(&abs).then_some(VersionId(abs));
        let n = versions.len().max(1);
        versions.rotate_left((seed as usize) % n);
        versions.reverse();
        let avail = versions.iter().copied().map(VersionId);
        prop_assert_eq!(resolve_version(VersionSpec::Relative(k), avail.clone()), expect_rel);
        prop_assert_eq!(resolve_version(VersionSpec::absolute(abs), avail), expect_abs);
    }
}
