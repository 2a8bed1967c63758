//! Synthetic weights. Bytes of every tensor are a function of model, shard,
//! tensor index and version, so a reader can check what it received
//! without asking the writer.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ros_core::digest64;

/// Group shapes named after common model sizes. Shard sizes are logical;
/// `--scale` shrinks them for desk runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub shards: u32,
    pub shard_bytes: u64,
}

const GB: u64 = 1_000_000_000;

pub const PRESETS: [Preset; 4] = [
    Preset {
        name: "9B",
        shards: 2,
        shard_bytes: 10 * GB,
    },
    Preset {
        name: "36B",
        shards: 4,
        shard_bytes: 19 * GB,
    },
    Preset {
        name: "260B",
        shards: 8,
        shard_bytes: 34 * GB,
    },
    Preset {
        name: "1T",
        shards: 16,
        shard_bytes: 66 * GB,
    },
];

pub fn preset(name: &str) -> Option<Preset> {
    PRESETS.iter().copied().find(|p| p.name.eq_ignore_ascii_case(name))
}

/// How one shard is cut into tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub shard_bytes: u64,
    pub tensors: usize,
}

impl Layout {
    pub fn sizes(&self) -> Vec<usize> {
        let n = self.tensors.max(1);
        let base = (self.shard_bytes / n as u64) as usize;
        let mut out = vec![base; n];
        out[n - 1] += (self.shard_bytes % n as u64) as usize;
        out
    }

    pub fn name(i: usize) -> String {
        format!("layer{i:03}.w")
    }
}

/// Overwrites `buf` with tensor `idx` of `version`.
pub fn fill(model: &str, shard: u32, idx: usize, version: u64, buf: &mut [u8]) {
    let seed = digest64(format!("{model}/{shard}/{idx}/{version}").as_bytes());
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(buf);
}

pub fn weights(model: &str, shard: u32, version: u64, layout: Layout) -> Vec<(String, Vec<u8>)> {
    layout
        .sizes()
        .into_iter()
        .enumerate()
        .map(|(i, len)| {
            let mut b = vec![0; len];
            fill(model, shard, i, version, &mut b);
            (Layout::name(i), b)
        })
        .collect()
}

pub fn zeros(layout: Layout) -> Vec<(String, Vec<u8>)> {
    layout
        .sizes()
        .into_iter()
        .enumerate()
        .map(|(i, len)| (Layout::name(i), vec![0; len]))
        .collect()
}

/// First tensor of `got` that differs from what `version` should hold.
pub fn first_mismatch(model: &str, shard: u32, version: u64, idx: usize, got: &[u8]) -> Option<usize> {
    let mut want = vec![0; got.len()];
    fill(model, shard, idx, version, &mut want);
    (want != got).then_some(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_covers_the_shard() {
        let l = Layout {
            shard_bytes: 1003,
            tensors: 4,
        };
        assert_eq!(l.sizes(), [250, 250, 250, 253]);
        assert_eq!(l.sizes().iter().sum::<usize>(), 1003);
    }

    #[test]
    fn versions_differ_and_repeat() {
        let l = Layout {
            shard_bytes: 64,
            tensors: 2,
        };
        assert_eq!(weights("m", 0, 1, l), weights("m", 0, 1, l));
        assert_ne!(weights("m", 0, 1, l), weights("m", 0, 2, l));
        assert_ne!(weights("m", 0, 1, l), weights("m", 1, 1, l));
        let w = weights("m", 0, 3, l);
        assert_eq!(first_mismatch("m", 0, 3, 1, &w[1].1), None);
        assert_eq!(first_mismatch("m", 0, 2, 1, &w[1].1), Some(1));
    }

    #[test]
    fn presets() {
        assert_eq!(preset("260b").unwrap().shards, 8);
        assert_eq!(preset("260B").unwrap().shard_bytes, 34 * GB);
        assert!(preset("7B").is_none());
    }
}
