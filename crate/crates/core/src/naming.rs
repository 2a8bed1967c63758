//! Shard coordinates, placement and retention declarations.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::version::{VersionId, VersionSpec};

/// Position of one shard inside the model / replica / shard hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShardCoord {
    pub model: String,
    pub replica: String,
    pub num_shards: u32,
    pub shard_idx: u32,
}

impl ShardCoord {
    pub fn new(model: impl Into<String>, replica: impl Into<String>, num_shards: u32, shard_idx: u32) -> Self {
        ShardCoord {
            model: model.into(),
            replica: replica.into(),
            num_shards,
            shard_idx,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.is_empty() || self.replica.is_empty() {
            return Err(Error::invalid("model and replica names must be nonempty"));
        }
        if self.num_shards == 0 {
            return Err(Error::invalid("num_shards must be positive"));
        }
        if self.shard_idx >= self.num_shards {
            return Err(Error::invalid(format!(
                "shard_idx {} out of range for {} shards",
                self.shard_idx, self.num_shards
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ShardCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.model, self.replica, self.shard_idx)
    }
}

/// Where a shard lives: its datacenter, whether the host is preemptible, and
/// the data-plane endpoint peers pull from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocationInfo {
    pub datacenter: String,
    pub spot: bool,
    pub endpoint: String,
}

impl LocationInfo {
    pub fn new(datacenter: impl Into<String>, spot: bool, endpoint: impl Into<String>) -> Self {
        LocationInfo {
            datacenter: datacenter.into(),
            spot,
            endpoint: endpoint.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datacenter.is_empty() {
            return Err(Error::invalid("datacenter id must be nonempty"));
        }
        if self.endpoint.is_empty() {
            return Err(Error::invalid("endpoint must be nonempty"));
        }
        Ok(())
    }
}

/// Relative versions a holder wants kept fetchable, e.g. `{0}` for `latest`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RetentionRule {
    pub lags: BTreeSet<u32>,
}

impl RetentionRule {
    pub fn none() -> Self {
        RetentionRule::default()
    }

    pub fn latest() -> Self {
        RetentionRule::lags([0])
    }

    pub fn lags(lags: impl IntoIterator<Item = u32>) -> Self {
        RetentionRule {
            lags: lags.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    /// Versions this rule retains, given every version that was ever fully
    /// published. Lag `k` names the (k+1)-th largest such version.
    pub fn retained(&self, published: &BTreeSet<VersionId>) -> BTreeSet<VersionId> {
        self.lags
            .iter()
            .filter_map(|&k| published.iter().rev().nth(k as usize).copied())
            .collect()
    }
}

impl FromStr for RetentionRule {
    type Err = Error;

    /// Accepts a comma separated list of relative specs: `latest,latest-1`.
    fn from_str(s: &str) -> Result<Self> {
        let mut lags = BTreeSet::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.parse::<VersionSpec>()? {
                VersionSpec::Relative(k) => {
                    lags.insert(k);
                }
                VersionSpec::Absolute(_) => {
                    return Err(Error::invalid(format!("retention takes relative versions, got {part:?}")))
                }
            }
        }
        Ok(RetentionRule { lags })
    }
}

impl fmt::Display for RetentionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.lags.iter().map(|&k| VersionSpec::Relative(k).to_string()).collect();
        f.write_str(&parts.join(","))
    }
}
