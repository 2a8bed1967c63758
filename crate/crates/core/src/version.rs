//! Absolute and relative version naming.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An absolute version number. Versions are totally ordered and never wrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VersionId(pub u64);

impl fmt::Display for VersionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for VersionId {
    fn from(v: u64) -> Self {
        VersionId(v)
    }
}

/// A version as named by a request: either a concrete number or a lag
/// behind the newest available version (`latest` is lag 0).
///
/// Relative specs only ever appear in requests; the server resolves them
/// before anything is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VersionSpec {
    Absolute(VersionId),
    Relative(u32),
}

impl VersionSpec {
    pub const LATEST: VersionSpec = VersionSpec::Relative(0);

    pub fn absolute(v: u64) -> Self {
        VersionSpec::Absolute(VersionId(v))
    }

    pub fn is_relative(&self) -> bool {
        matches!(self, VersionSpec::Relative(_))
    }
}

impl fmt::Display for VersionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VersionSpec::Absolute(v) => write!(f, "{v}"),
            VersionSpec::Relative(0) => f.write_str("latest"),
            VersionSpec::Relative(k) => write!(f, "latest-{k}"),
        }
    }
}

impl FromStr for VersionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "latest" {
            return Ok(VersionSpec::Relative(0));
        }
        if let Some(lag) = s.strip_prefix("latest-") {
            return lag
                .parse::<u32>()
                .map(VersionSpec::Relative)
                .map_err(|_| Error::invalid(format!("bad relative version {s:?}")));
        }
        s.parse::<u64>()
            .map(VersionSpec::absolute)
            .map_err(|_| Error::invalid(format!("bad version {s:?}")))
    }
}

impl Serialize for VersionSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VersionSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(v) => Ok(VersionSpec::absolute(v)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Resolves `spec` against the set of available versions.
///
/// `absolute(v)` resolves to `v` only if it is available. `relative(k)`
/// resolves to the (k+1)-th largest available version. `None` means the
/// spec cannot currently be satisfied; it is a value, not an error.
pub fn resolve_version<I>(spec: VersionSpec, available: I) -> Option<VersionId>
where
    I: IntoIterator<Item = VersionId>,
{
    let available: BTreeSet<VersionId> = available.into_iter().collect();
    match spec {
        VersionSpec::Absolute(v) => available.contains(&v).then_some(v),
        VersionSpec::Relative(k) => available.iter().rev().nth(k as usize).copied(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(vs: &[u64]) -> Vec<VersionId> {
        vs.iter().copied().map(VersionId).collect()
    }

    #[test]
    fn latest_of_single_version() {
        assert_eq!(resolve_version(VersionSpec::LATEST, set(&[12])), Some(VersionId(12)));
    }

    #[test]
    fn absolute_against_empty_set() {
        assert_eq!(resolve_version(VersionSpec::absolute(5), set(&[])), None);
    }

    #[test]
    fn latest_minus_one_is_second_largest() {
        assert_eq!(resolve_version(VersionSpec::Relative(1), set(&[2, 3])), Some(VersionId(2)));
        assert_eq!(resolve_version(VersionSpec::Relative(2), set(&[2, 3])), None);
    }

    #[test]
    fn parse_and_display_round_trip() {
        for text in ["latest", "latest-3", "17"] {
            let spec: VersionSpec = text.parse().unwrap();
            assert_eq!(spec.to_string(), text);
        }
        assert!("latest-".parse::<VersionSpec>().is_err());
        assert!("newest".parse::<VersionSpec>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn resolution_ignores_insertion_order(
            mut versions in proptest::collection::vec(0u64..50, 0..12),
            lag in 0u32..6,
            abs in 0u64..50,
            seed in 0u64..1000,
        ) {
            let forward = set(&versions);
            let a = resolve_version(VersionSpec::Relative(lag), forward.clone());
            let b = resolve_version(VersionSpec::absolute(abs), forward);
            // deterministic shuffle
            let n = versions.len().max(1);
            versions.rotate_left((seed as usize) % n);
            versions.reverse();
            let shuffled = set(&versions);
            proptest::prop_assert_eq!(a, resolve_version(VersionSpec::Relative(lag), shuffled.clone()));
            proptest::prop_assert_eq!(b, resolve_version(VersionSpec::absolute(abs), shuffled));
        }
    }
}
