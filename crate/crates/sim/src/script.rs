//! Declarative simulation scripts.
//!
//! A script names the nodes, actors and timed steps of one run, plus the
//! assertions its trace must satisfy. Times are virtual seconds.
//!
//! ```toml
//! [[actor]]
//! id = "replica-0"
//! shards = 2
//!
//! [[step]]
//! at = 1.0
//! actor = "replica-0/0"
//! action = "replicate"
//! spec = "latest"
//! ```
//!
//! An actor declared with `shards = n > 1` expands into the shard actors
//! `id/0 .. id/n-1`; a step naming the bare id runs on every shard in order.

use std::collections::BTreeSet;

use ros_core::VersionSpec;
use serde::{Deserialize, Serialize};

use crate::SimError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    /// Stop the run at this virtual time even if work is pending.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until: Option<f64>,
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub payload: Payload,
    #[serde(default, rename = "node", skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<NodeDef>,
    #[serde(default, rename = "actor", skip_serializing_if = "Vec::is_empty")]
    pub actors: Vec<ActorDef>,
    #[serde(default, rename = "step", skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<Step>,
    /// Steps issued at one instant in an order left to exploration.
    #[serde(default, rename = "group", skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<Group>,
    #[serde(default, rename = "assert", skip_serializing_if = "Vec::is_empty")]
    pub asserts: Vec<Assertion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    pub pipeline: bool,
    pub smart_skipping: bool,
    pub heartbeat_interval: f64,
    pub heartbeat_timeout: f64,
    pub txn_timeout: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compaction_threshold: Option<u64>,
    /// Start a backup server clients fail over to.
    pub backup: bool,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            pipeline: true,
            smart_skipping: true,
            heartbeat_interval: 1.0,
            heartbeat_timeout: 5.0,
            txn_timeout: 60.0,
            compaction_threshold: None,
            backup: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    /// Uplink and downlink of nodes not declared explicitly, bytes/s.
    pub rate: u64,
    pub local_copy: u64,
    /// Silence after which a reader gives up on a source.
    pub detect_timeout: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkDef>,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            rate: 1_000_000_000,
            local_copy: 10_000_000_000,
            detect_timeout: 4.0,
            links: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDef {
    pub a: String,
    pub b: String,
    pub rate: u64,
}

/// Synthetic tensors of every shard: `entries` tensors of `entry_bytes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Payload {
    pub entries: usize,
    pub entry_bytes: u64,
}

impl Default for Payload {
    fn default() -> Self {
        Payload {
            entries: 4,
            entry_bytes: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDef {
    pub name: String,
    #[serde(default = "default_dc")]
    pub dc: String,
    pub up: Option<u64>,
    pub down: Option<u64>,
}

fn default_dc() -> String {
    "dc0".into()
}

fn default_model() -> String {
    "m".into()
}

fn one() -> u32 {
    1
}

fn is_one(n: &u32) -> bool {
    *n == 1
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorDef {
    pub id: String,
    #[serde(default = "default_model")]
    pub model: String,
    /// Replica name; defaults to `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replica: Option<String>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub shards: u32,
    #[serde(default = "default_dc")]
    pub dc: String,
    #[serde(default, skip_serializing_if = "is_false")]
    pub spot: bool,
    /// Retained lags, e.g. `[0]` keeps the newest version available.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retain: Vec<u32>,
    /// Node hosting the shards; defaults to one node per shard actor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Open,
    Register,
    Publish,
    Unpublish,
    Replicate,
    Update,
    List,
    Close,
    /// The actor's node dies: no more heartbeats, no more bytes.
    Crash,
    /// The actor stops heartbeating but keeps serving.
    HaltHeartbeats,
    /// The actor loses its server connection and fails over.
    PartitionServer,
    /// The server the actor is connected to dies; everyone fails over.
    KillServer,
    /// The next `count` units the actor serves carry a flipped bit.
    Corrupt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    #[serde(default)]
    pub at: f64,
    pub actor: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<VersionSpec>,
    /// Ask for a background seeding buffer on a cross-DC update.
    #[serde(default, skip_serializing_if = "is_false")]
    pub seeding: bool,
    /// Repeat an update every `poll` seconds until it changes something.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u32>,
}

impl Step {
    pub fn new(at: f64, actor: impl Into<String>, action: Action) -> Self {
        Step {
            at,
            actor: actor.into(),
            action,
            version: None,
            spec: None,
            seeding: false,
            poll: None,
            count: None,
        }
    }

    pub fn version(mut self, v: u64) -> Self {
        self.version = Some(v);
        self
    }

    pub fn spec(mut self, spec: VersionSpec) -> Self {
        self.spec = Some(spec);
        self
    }

    pub fn poll(mut self, every: f64) -> Self {
        self.poll = Some(every);
        self
    }

    pub fn seeding(mut self, on: bool) -> Self {
        self.seeding = on;
        self
    }

    pub fn count(mut self, n: u32) -> Self {
        self.count = Some(n);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Group {
    #[serde(default)]
    pub at: f64,
    pub steps: Vec<Step>,
}

/// A predicate over the finished trace. Patterns are plain substrings of
/// trace lines (the time column excluded).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Assertion {
    Contains { pattern: String },
    Absent { pattern: String },
    Count { pattern: String, n: usize },
    /// The first line matching `first` precedes the first matching `then`.
    Before { first: String, then: String },
    /// No line matching `pattern` follows the first line matching `marker`.
    NotAfter { marker: String, pattern: String },
    /// Every assignment to a shard of `replica` names `version`, and every
    /// shard actor of it ends published at `version`.
    Resolved { replica: String, version: u64 },
    Final { actor: String, state: String },
}

/// One shard actor after expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardActor {
    pub id: String,
    pub model: String,
    pub replica: String,
    pub num_shards: u32,
    pub shard: u32,
    pub dc: String,
    pub spot: bool,
    pub retain: Vec<u32>,
    pub node: String,
}

impl Script {
    pub fn parse(text: &str) -> Result<Script, SimError> {
        let script: Script = toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        script.check()?;
        Ok(script)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scripts always serialize")
    }

    /// Shard actors in declaration order.
    pub fn shard_actors(&self) -> Vec<ShardActor> {
        let mut out = Vec::new();
        for a in &self.actors {
            for shard in 0..a.shards {
                let id = if a.shards == 1 {
                    a.id.clone()
                } else {
                    format!("{}/{shard}", a.id)
                };
                out.push(ShardActor {
                    node: a.node.clone().unwrap_or_else(|| id.clone()),
                    id,
                    model: a.model.clone(),
                    replica: a.replica.clone().unwrap_or_else(|| a.id.clone()),
                    num_shards: a.shards,
                    shard,
                    dc: a.dc.clone(),
                    spot: a.spot,
                    retain: a.retain.clone(),
                });
            }
        }
        out
    }

    /// Shard actor ids a step name refers to.
    pub fn targets(&self, name: &str) -> Vec<String> {
        if let Some(a) = self.actors.iter().find(|a| a.id == name) {
            return self
                .shard_actors()
                .into_iter()
                .filter(|s| s.replica == a.replica.clone().unwrap_or_else(|| a.id.clone()) && s.model == a.model)
                .map(|s| s.id)
                .collect();
        }
        self.shard_actors()
            .into_iter()
            .filter(|s| s.id == name)
            .map(|s| s.id)
            .collect()
    }

    /// Validates references and arguments.
    pub fn check(&self) -> Result<(), SimError> {
        let mut ids = BTreeSet::new();
        for a in &self.actors {
            if a.shards == 0 {
                return Err(SimError::Invalid(format!("actor {} has no shards", a.id)));
            }
            if !ids.insert(a.id.clone()) {
                return Err(SimError::Invalid(format!("duplicate actor {}", a.id)));
            }
        }
        let mut shard_ids = BTreeSet::new();
        for s in self.shard_actors() {
            if !shard_ids.insert(s.id.clone()) {
                return Err(SimError::Invalid(format!("duplicate shard actor {}", s.id)));
            }
        }
        let steps = self.steps.iter().chain(self.groups.iter().flat_map(|g| g.steps.iter()));
        for step in steps {
            if self.targets(&step.actor).is_empty() {
                return Err(SimError::UnknownActor(step.actor.clone()));
            }
            if step.action == Action::Publish && step.version.is_none() {
                return Err(SimError::Invalid(format!("publish by {} needs a version", step.actor)));
            }
            if !(step.at.is_finite() && step.at >= 0.0) {
                return Err(SimError::Invalid(format!("bad time {} for {}", step.at, step.actor)));
            }
            if step.poll.is_some_and(|p| !(p.is_finite() && p > 0.0)) {
                return Err(SimError::Invalid(format!("bad poll interval for {}", step.actor)));
            }
        }
        for n in &self.nodes {
            if n.up == Some(0) || n.down == Some(0) {
                return Err(SimError::Invalid(format!("node {} has a zero rate", n.name)));
            }
        }
        if self.net.rate == 0 || self.net.local_copy == 0 || self.net.links.iter().any(|l| l.rate == 0) {
            return Err(SimError::Invalid("rates must be positive".into()));
        }
        if self.payload.entries == 0 || self.payload.entry_bytes == 0 {
            return Err(SimError::Invalid("payload must not be empty".into()));
        }
        Ok(())
    }

    /// Number of orders exploration would run.
    pub fn interleavings(&self) -> u128 {
        self.groups
            .iter()
            .map(|g| (1..=g.steps.len() as u128).product::<u128>())
            .product()
    }

    /// The script with every group issued in the given orders, as plain
    /// steps.
    pub fn linearize(&self, orders: &[Vec<usize>]) -> Script {
        let mut out = self.clone();
        out.groups.clear();
        for (g, order) in self.groups.iter().zip(orders) {
            for &i in order {
                let mut s = g.steps[i].clone();
                s.at = g.at;
                out.steps.push(s);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expands_multi_shard_actors() {
        let s = Script::parse(
            r#"
            [[actor]]
            id = "r0"
            shards = 2
            [[actor]]
            id = "t"
            [[step]]
            actor = "r0"
            action = "open"
            "#,
        )
        .unwrap();
        let ids: Vec<String> = s.shard_actors().into_iter().map(|a| a.id).collect();
        assert_eq!(ids, ["r0/0", "r0/1", "t"]);
        assert_eq!(s.targets("r0"), ["r0/0", "r0/1"]);
        assert_eq!(s.targets("r0/1"), ["r0/1"]);
    }

    #[test]
    fn unknown_actor_is_invalid() {
        let err = Script::parse("[[step]]\nactor = \"ghost\"\naction = \"open\"\n").unwrap_err();
        assert!(matches!(err, SimError::UnknownActor(a) if a == "ghost"));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut s = Script::default();
        s.actors.push(ActorDef {
            id: "a".into(),
            model: "m".into(),
            replica: None,
            shards: 1,
            dc: "dc0".into(),
            spot: false,
            retain: vec![0],
            node: None,
        });
        s.steps.push(Step::new(0.5, "a", Action::Replicate).spec(VersionSpec::LATEST));
        s.asserts.push(Assertion::Count {
            pattern: "x".into(),
            n: 1,
        });
        assert_eq!(Script::parse(&s.to_toml()).unwrap(), s);
    }
}
