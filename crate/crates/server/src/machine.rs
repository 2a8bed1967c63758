//! The reference server as a deterministic state machine.
//!
//! [`ReferenceServer::handle`] consumes one request and returns the frames
//! to send; nothing here blocks or performs I/O. Operations that must wait
//! (a blocked replicate, an unpublish drain, a group transaction missing
//! shards) are parked in the records and completed by later events. After
//! every event [`ReferenceServer::settle`] runs until no parked work can make
//! progress.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use ros_core::{
    resolve_version, Directive, ErrorCode, FailureKind, Listing, LocationInfo, Reply, Request, RetentionRule,
    ServerError, ShardCoord, SourceAssignment, TensorManifest, Token, UpdateDecision, VersionId, VersionSpec,
};

use crate::config::ServerConfig;
use crate::event::Event;

/// Identifies one control connection.
pub type ClientId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outbound {
    Reply { client: ClientId, req_id: u64, reply: Reply },
    Push { client: ClientId, token: Token, directive: Directive },
}

type Key = (String, String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardState {
    Empty,
    Replicating,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplicaKind {
    Worker,
    /// Host-memory copy kept to satisfy retention.
    Offload { host: String },
    /// Host-memory buffer filled over a cross-datacenter link.
    Seed { host: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lifecycle {
    Registered,
    Published,
    Replicating,
    Unpublishing,
    Failed,
}

/// Read-only view of a replica record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaView {
    pub name: String,
    pub kind: ReplicaKind,
    pub lifecycle: Lifecycle,
    pub version: Option<VersionId>,
    pub datacenter: String,
    pub spot: bool,
    pub seeding: bool,
    pub serving_count: usize,
    pub shard_states: Vec<ShardState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Drain {
    Txn(u64),
    Release,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Waiter {
    client: ClientId,
    req_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Notify {
    /// First assignment of a group operation; answered through the txn.
    Txn { owner: Key, op: u64 },
    /// A failure report waiting for an alternate source.
    Reply(Waiter),
    /// The previous source was evicted behind the receiver's back.
    Push,
}

#[derive(Debug, Clone)]
struct Slot {
    token: Option<Token>,
    endpoint: String,
    state: ShardState,
    manifest: Option<TensorManifest>,
    progress: u64,
    source: Option<String>,
    fill_op: u64,
    /// Present while replicating without a source.
    notify: Option<Notify>,
}

impl Slot {
    fn new(token: Option<Token>, endpoint: String) -> Slot {
        Slot {
            token,
            endpoint,
            state: ShardState::Empty,
            manifest: None,
            progress: 0,
            source: None,
            fill_op: 0,
            notify: None,
        }
    }

    fn clear_data(&mut self) {
        self.state = ShardState::Empty;
        self.manifest = None;
        self.progress = 0;
        self.source = None;
        self.notify = None;
    }
}

#[derive(Debug)]
struct Replica {
    model: String,
    name: String,
    kind: ReplicaKind,
    num_shards: u32,
    dc: String,
    spot: bool,
    slots: Vec<Slot>,
    version: Option<VersionId>,
    life: Lifecycle,
    drain: Option<Drain>,
    seeding: bool,
    last_assigned: u64,
    last_published: Option<VersionId>,
    avoid: BTreeSet<String>,
    txns: BTreeMap<u64, Txn>,
}

impl Replica {
    fn key(&self) -> Key {
        (self.model.clone(), self.name.clone())
    }

    fn reset_data(&mut self, life: Lifecycle) {
        for s in &mut self.slots {
            s.clear_data();
        }
        self.version = None;
        self.life = life;
        self.drain = None;
        self.seeding = false;
        self.avoid.clear();
    }

    fn has_tokens(&self) -> bool {
        self.slots.iter().any(|s| s.token.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TxnKind {
    Publish,
    Unpublish,
    Replicate,
    Update,
}

impl TxnKind {
    fn name(self) -> &'static str {
        match self {
            TxnKind::Publish => "publish",
            TxnKind::Unpublish => "unpublish",
            TxnKind::Replicate => "replicate",
            TxnKind::Update => "update",
        }
    }
}

#[derive(Debug, Clone)]
enum Arrival {
    Publish {
        version: VersionId,
        manifest: TensorManifest,
    },
    Unpublish,
    Replicate {
        spec: VersionSpec,
    },
    Update {
        spec: VersionSpec,
        current: Option<VersionId>,
        offload_seeding: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Then {
    Ack,
    Change(VersionId),
}

#[derive(Debug, Clone)]
enum Stage {
    New,
    Collecting {
        checked: BTreeSet<u32>,
    },
    Resolving {
        spec: VersionSpec,
        logged: bool,
    },
    Draining(Then),
    Offloading {
        version: VersionId,
        confirmed: BTreeMap<u32, Waiter>,
        then: Then,
    },
    Assigning {
        version: VersionId,
        target: Key,
        started: BTreeSet<u32>,
    },
    Finished(Reply),
}

#[derive(Debug)]
struct Txn {
    kind: TxnKind,
    started_at: Duration,
    order: Vec<u32>,
    arrivals: BTreeMap<u32, Arrival>,
    pending: BTreeMap<u32, Waiter>,
    stage: Stage,
}

impl Txn {
    /// Past the point where it can still change the replica's state in a way
    /// a later operation must wait for.
    fn settled(&self) -> bool {
        matches!(self.stage, Stage::Finished(_) | Stage::Assigning { .. })
    }
}

#[derive(Debug, Clone)]
struct TokenInfo {
    client: ClientId,
    key: Key,
    shard: u32,
    retain: RetentionRule,
    lease: Duration,
    /// Set for the per-shard tokens of a seeding buffer.
    parent: Option<Token>,
}

pub struct ReferenceServer {
    cfg: ServerConfig,
    now: Duration,
    next_token: u64,
    assign_clock: u64,
    tokens: BTreeMap<Token, TokenInfo>,
    replicas: BTreeMap<Key, Replica>,
    ever_published: BTreeMap<String, BTreeSet<VersionId>>,
    /// (model, version, num_shards, shard) -> manifest digest of the first publish.
    known_manifests: BTreeMap<(String, VersionId, u32, u32), u64>,
    out: Vec<Outbound>,
    events: Vec<Event>,
}

fn err(code: ErrorCode, msg: impl Into<String>) -> ServerError {
    ServerError::new(code, msg)
}

impl ReferenceServer {
    pub fn new(cfg: ServerConfig) -> Self {
        ReferenceServer {
            cfg,
            now: Duration::ZERO,
            next_token: 1,
            assign_clock: 0,
            tokens: BTreeMap::new(),
            replicas: BTreeMap::new(),
            ever_published: BTreeMap::new(),
            known_manifests: BTreeMap::new(),
            out: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    /// Applies one request received from `client` at time `now`.
    pub fn handle(&mut self, now: Duration, client: ClientId, req_id: u64, req: Request) -> Vec<Outbound> {
        self.now = self.now.max(now);
        let waiter = Waiter { client, req_id };
        let result = match req {
            Request::Open { coord, location, retain } => self.open(client, coord, location, retain).map(Some),
            Request::Publish {
                token,
                version,
                manifest,
                op_seq,
            } => self.arrive(token, op_seq, TxnKind::Publish, Arrival::Publish { version, manifest }, waiter),
            Request::Unpublish { token, op_seq } => {
                self.arrive(token, op_seq, TxnKind::Unpublish, Arrival::Unpublish, waiter)
            }
            Request::Replicate { token, spec, op_seq } => {
                self.arrive(token, op_seq, TxnKind::Replicate, Arrival::Replicate { spec }, waiter)
            }
            Request::Update {
                token,
                spec,
                current,
                op_seq,
                offload_seeding,
            } => self.arrive(
                token,
                op_seq,
                TxnKind::Update,
                Arrival::Update {
                    spec,
                    current,
                    offload_seeding,
                },
                waiter,
            ),
            Request::Progress { token, progress } => self.progress(token, progress).map(Some),
            Request::Complete { token, op_seq } => self.complete(token, op_seq).map(Some),
            Request::List { model } => Ok(Some(Reply::Listing(self.list(&model)))),
            Request::Heartbeat { token } => self.heartbeat(token).map(Some),
            Request::FailureReport {
                token,
                failed_replica,
                kind,
                op_seq,
            } => self.failure_report(token, failed_replica, kind, op_seq, waiter),
            Request::OffloadConfirm { token, ok, op_seq } => self.offload_confirm(token, ok, op_seq, waiter),
            Request::Close { token } => self.close(token).map(Some),
        };
        match result {
            Ok(Some(reply)) => self.reply(waiter, reply),
            Ok(None) => {}
            Err(e) => self.reply(waiter, Reply::Error(e)),
        }
        self.settle();
        std::mem::take(&mut self.out)
    }

    /// Expires leases and overdue transactions.
    pub fn sweep(&mut self, now: Duration) -> Vec<Outbound> {
        self.now = self.now.max(now);
        let timeout = self.cfg.heartbeat_timeout;
        let expired: Vec<Token> = self
            .tokens
            .iter()
            .filter(|(_, t)| t.parent.is_none() && self.now.saturating_sub(t.lease) > timeout)
            .map(|(k, _)| *k)
            .collect();
        for token in expired {
            self.drop_token(token, "heartbeat timeout");
        }

        let mut overdue = Vec::new();
        for (key, r) in &self.replicas {
            for (op, txn) in &r.txns {
                if txn.arrivals.len() < r.num_shards as usize
                    && !matches!(txn.stage, Stage::Finished(_))
                    && self.now.saturating_sub(txn.started_at) > self.cfg.txn_timeout
                {
                    overdue.push((key.clone(), *op));
                }
            }
        }
        for (key, op) in overdue {
            self.abort_txn(&key, op, "transaction timeout");
        }
        self.settle();
        std::mem::take(&mut self.out)
    }

    /// Removes and returns the decisions recorded since the last call.
    pub fn drain_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn list(&self, model: &str) -> Listing {
        let mut out = Listing::new();
        for r in self.replicas.values() {
            if r.model == model && r.life == Lifecycle::Published {
                if let Some(v) = r.version {
                    out.entry(v).or_default().insert(r.name.clone());
                }
            }
        }
        out
    }

    pub fn replica(&self, model: &str, name: &str) -> Option<ReplicaView> {
        self.replicas
            .get(&(model.to_string(), name.to_string()))
            .map(|r| self.view(r))
    }

    pub fn replicas(&self, model: &str) -> Vec<ReplicaView> {
        self.replicas.values().filter(|r| r.model == model).map(|r| self.view(r)).collect()
    }

    pub fn open_handles(&self) -> usize {
        self.tokens.values().filter(|t| t.parent.is_none()).count()
    }

    fn view(&self, r: &Replica) -> ReplicaView {
        ReplicaView {
            name: r.name.clone(),
            kind: r.kind.clone(),
            lifecycle: r.life,
            version: r.version,
            datacenter: r.dc.clone(),
            spot: r.spot,
            seeding: r.seeding,
            serving_count: self.serving_count(&r.model, &r.name),
            shard_states: r.slots.iter().map(|s| s.state).collect(),
        }
    }

    fn reply(&mut self, w: Waiter, reply: Reply) {
        self.out.push(Outbound::Reply {
            client: w.client,
            req_id: w.req_id,
            reply,
        });
    }

    fn push(&mut self, token: Token, directive: Directive) {
        if let Some(info) = self.tokens.get(&token) {
            self.out.push(Outbound::Push {
                client: info.client,
                token,
                directive,
            });
        }
    }

    fn lookup(&self, token: Token) -> Result<(Key, u32), ServerError> {
        self.tokens
            .get(&token)
            .map(|t| (t.key.clone(), t.shard))
            .ok_or_else(|| err(ErrorCode::UnknownHandle, format!("no open handle {token}")))
    }

    fn lookup_worker(&self, token: Token) -> Result<(Key, u32), ServerError> {
        let info = self
            .tokens
            .get(&token)
            .ok_or_else(|| err(ErrorCode::UnknownHandle, format!("no open handle {token}")))?;
        if info.parent.is_some() {
            return Err(err(ErrorCode::InvalidArgument, "seeding token used for a handle operation"));
        }
        Ok((info.key.clone(), info.shard))
    }

    // ----- simple requests -------------------------------------------------

    fn open(
        &mut self,
        client: ClientId,
        coord: ShardCoord,
        location: LocationInfo,
        retain: RetentionRule,
    ) -> Result<Reply, ServerError> {
        if coord.num_shards == 0 || coord.shard_idx >= coord.num_shards {
            return Err(err(
                ErrorCode::InvalidGroup,
                format!("shard {} outside group of {}", coord.shard_idx, coord.num_shards),
            ));
        }
        coord.validate().map_err(|e| err(ErrorCode::InvalidArgument, e.to_string()))?;
        location.validate().map_err(|e| err(ErrorCode::InvalidArgument, e.to_string()))?;
        if coord.replica.contains('+') {
            return Err(err(ErrorCode::InvalidArgument, "replica names may not contain '+'"));
        }
        let key = (coord.model.clone(), coord.replica.clone());
        if let Some(r) = self.replicas.get(&key) {
            if r.num_shards != coord.num_shards {
                return Err(err(
                    ErrorCode::InvalidGroup,
                    format!("replica {} has {} shards, not {}", r.name, r.num_shards, coord.num_shards),
                ));
            }
            if r.dc != location.datacenter || r.spot != location.spot {
                return Err(err(ErrorCode::InvalidGroup, "shards of one replica must share datacenter and spot flag"));
            }
            if r.slots[coord.shard_idx as usize].token.is_some() {
                return Err(err(ErrorCode::AlreadyOpen, format!("{coord} is already open")));
            }
        }
        let token = Token(self.next_token);
        self.next_token += 1;
        let r = self.replicas.entry(key.clone()).or_insert_with(|| Replica {
            model: coord.model.clone(),
            name: coord.replica.clone(),
            kind: ReplicaKind::Worker,
            num_shards: coord.num_shards,
            dc: location.datacenter.clone(),
            spot: location.spot,
            slots: (0..coord.num_shards).map(|_| Slot::new(None, String::new())).collect(),
            version: None,
            life: Lifecycle::Registered,
            drain: None,
            seeding: false,
            last_assigned: 0,
            last_published: None,
            avoid: BTreeSet::new(),
            txns: BTreeMap::new(),
        });
        let slot = &mut r.slots[coord.shard_idx as usize];
        slot.token = Some(token);
        slot.endpoint = location.endpoint.clone();
        self.tokens.insert(
            token,
            TokenInfo {
                client,
                key,
                shard: coord.shard_idx,
                retain,
                lease: self.now,
                parent: None,
            },
        );
        self.events.push(Event::Opened {
            model: coord.model,
            replica: coord.replica,
            shard: coord.shard_idx,
            token: token.0,
        });
        Ok(Reply::Opened {
            token,
            compaction: self.cfg.compaction,
        })
    }

    fn heartbeat(&mut self, token: Token) -> Result<Reply, ServerError> {
        let now = self.now;
        let info = self
            .tokens
            .get_mut(&token)
            .ok_or_else(|| err(ErrorCode::UnknownHandle, format!("no open handle {token}")))?;
        info.lease = now;
        Ok(Reply::Ack)
    }

    fn close(&mut self, token: Token) -> Result<Reply, ServerError> {
        let (key, shard) = self.lookup_worker(token)?;
        self.events.push(Event::Closed {
            replica: key.1.clone(),
            shard,
        });
        self.drop_token(token, "closed");
        Ok(Reply::Ack)
    }

    fn progress(&mut self, token: Token, progress: u64) -> Result<Reply, ServerError> {
        let (key, shard) = self.lookup(token)?;
        let slot = &mut self.replicas.get_mut(&key).expect("token names a replica").slots[shard as usize];
        match slot.state {
            ShardState::Replicating => {
                if progress < slot.progress {
                    return Err(err(
                        ErrorCode::ProtocolViolation,
                        format!("progress went from {} to {progress}", slot.progress),
                    ));
                }
                slot.progress = progress;
                Ok(Reply::Ack)
            }
            ShardState::Complete => Ok(Reply::Ack),
            ShardState::Empty => Err(err(ErrorCode::VersionUnavailable, "no fill in progress")),
        }
    }

    fn complete(&mut self, token: Token, op_seq: u64) -> Result<Reply, ServerError> {
        let (key, shard) = self.lookup(token)?;
        let r = self.replicas.get_mut(&key).expect("token names a replica");
        let slot = &mut r.slots[shard as usize];
        match slot.state {
            ShardState::Complete if slot.fill_op == op_seq => return Ok(Reply::Ack),
            ShardState::Replicating if slot.fill_op == op_seq && slot.source.is_some() => {}
            ShardState::Replicating if slot.fill_op == op_seq => {
                return Err(err(ErrorCode::InvalidState, "completion reported while awaiting a source"))
            }
            _ => return Err(err(ErrorCode::VersionUnavailable, "fill was voided")),
        }
        slot.state = ShardState::Complete;
        slot.source = None;
        slot.progress = slot.manifest.as_ref().map_or(0, |m| m.len() as u64);
        if r.slots.iter().all(|s| s.state == ShardState::Complete) {
            let v = r.version.expect("replicating replica has a version");
            r.life = Lifecycle::Published;
            r.seeding = false;
            r.avoid.clear();
            r.last_published = Some(v);
            let (model, name, n) = (r.model.clone(), r.name.clone(), r.num_shards);
            let digests: Vec<u64> = r.slots.iter().map(|s| s.manifest.as_ref().map_or(0, |m| m.digest())).collect();
            for (i, d) in digests.into_iter().enumerate() {
                self.known_manifests.entry((model.clone(), v, n, i as u32)).or_insert(d);
            }
            self.ever_published.entry(model).or_default().insert(v);
            self.events.push(Event::Published { replica: name, version: v });
        }
        Ok(Reply::Ack)
    }

    // ----- group transactions ---------------------------------------------

    fn arrive(
        &mut self,
        token: Token,
        op_seq: u64,
        kind: TxnKind,
        arrival: Arrival,
        waiter: Waiter,
    ) -> Result<Option<Reply>, ServerError> {
        let (key, shard) = self.lookup_worker(token)?;
        let now = self.now;
        let r = self.replicas.get_mut(&key).expect("token names a replica");
        let txn = r.txns.entry(op_seq).or_insert_with(|| Txn {
            kind,
            started_at: now,
            order: Vec::new(),
            arrivals: BTreeMap::new(),
            pending: BTreeMap::new(),
            stage: Stage::New,
        });
        if txn.kind != kind {
            return Err(err(
                ErrorCode::ProtocolViolation,
                format!("op {op_seq} is a {} for this group, not a {}", txn.kind.name(), kind.name()),
            ));
        }
        if txn.arrivals.contains_key(&shard) {
            return Err(err(ErrorCode::ProtocolViolation, format!("shard {shard} repeated op {op_seq}")));
        }
        txn.order.push(shard);
        txn.arrivals.insert(shard, arrival);
        txn.pending.insert(shard, waiter);
        Ok(None)
    }

    fn step_all(&mut self) -> bool {
        let mut changed = false;
        let keys: Vec<Key> = self.replicas.keys().cloned().collect();
        for key in keys {
            while let Some(r) = self.replicas.get(&key) {
                // Run the lowest transaction that has not settled, plus every
                // settled one (they only need to answer late arrivals).
                let mut runnable = Vec::new();
                for (op, txn) in &r.txns {
                    runnable.push(*op);
                    if !txn.settled() {
                        break;
                    }
                }
                let mut progressed = false;
                for op in runnable {
                    progressed |= self.step(&key, op);
                }
                if !progressed {
                    break;
                }
                changed = true;
            }
        }
        changed
    }

    fn txn_mut(&mut self, key: &Key, op: u64) -> Option<&mut Txn> {
        self.replicas.get_mut(key).and_then(|r| r.txns.get_mut(&op))
    }

    fn step(&mut self, key: &Key, op: u64) -> bool {
        let Some(txn) = self.txn_mut(key, op) else { return false };
        let stage = txn.stage.clone();
        let changed = match stage {
            Stage::New => {
                let kind = txn.kind;
                self.events.push(Event::TxnStarted {
                    replica: key.1.clone(),
                    op_seq: op,
                    kind: kind.name(),
                });
                let next = match self.start(key, op) {
                    Ok(s) => s,
                    Err(e) => {
                        self.events.push(Event::Rejected {
                            replica: key.1.clone(),
                            op: kind.name(),
                            error: e.to_string(),
                        });
                        Stage::Finished(Reply::Error(e))
                    }
                };
                self.set_stage(key, op, next);
                true
            }
            Stage::Collecting { checked } => self.step_publish(key, op, checked),
            Stage::Resolving { spec, logged } => self.step_resolve(key, op, spec, logged),
            Stage::Draining(then) => self.step_drain(key, op, then),
            Stage::Offloading {
                version,
                confirmed,
                then,
            } => self.step_offload(key, op, version, confirmed, then),
            Stage::Assigning {
                version,
                target,
                started,
            } => self.step_assign(key, op, version, target, started),
            Stage::Finished(reply) => {
                let txn = self.txn_mut(key, op).expect("txn exists");
                let pending = std::mem::take(&mut txn.pending);
                let kind = txn.kind;
                let any = !pending.is_empty();
                for (shard, w) in pending {
                    if kind == TxnKind::Update {
                        if let Reply::Decision(UpdateDecision::NoChange) = reply {
                            self.events.push(Event::Decided {
                                replica: key.1.clone(),
                                op_seq: op,
                                shard,
                                decision: "no-change".into(),
                            });
                        }
                    }
                    self.reply(w, reply.clone());
                }
                any
            }
        };
        self.maybe_retire(key, op);
        changed
    }

    fn set_stage(&mut self, key: &Key, op: u64, stage: Stage) {
        if let Some(txn) = self.txn_mut(key, op) {
            txn.stage = stage;
        }
    }

    fn maybe_retire(&mut self, key: &Key, op: u64) {
        let Some(r) = self.replicas.get_mut(key) else { return };
        let n = r.num_shards as usize;
        let done = r.txns.get(&op).is_some_and(|t| {
            t.arrivals.len() == n && t.pending.is_empty() && matches!(t.stage, Stage::Finished(_) | Stage::Assigning { .. })
        });
        if done {
            r.txns.remove(&op);
        }
    }

    fn first_arrival(&self, key: &Key, op: u64) -> Arrival {
        let txn = &self.replicas[key].txns[&op];
        txn.arrivals[&txn.order[0]].clone()
    }

    fn start(&mut self, key: &Key, op: u64) -> Result<Stage, ServerError> {
        let arrival = self.first_arrival(key, op);
        let r = &self.replicas[key];
        let life = r.life;
        let idle = matches!(life, Lifecycle::Registered | Lifecycle::Failed);
        match arrival {
            Arrival::Publish { .. } => {
                if !idle {
                    return Err(err(ErrorCode::InvalidState, format!("replica is {life:?}, cannot publish")));
                }
                Ok(Stage::Collecting {
                    checked: BTreeSet::new(),
                })
            }
            Arrival::Unpublish => {
                if life != Lifecycle::Published {
                    return Err(err(ErrorCode::InvalidState, format!("replica is {life:?}, not published")));
                }
                self.revoke(key, Drain::Txn(op));
                Ok(Stage::Draining(Then::Ack))
            }
            Arrival::Replicate { spec } => {
                if !idle {
                    return Err(err(ErrorCode::InvalidState, format!("replica is {life:?}, cannot replicate")));
                }
                Ok(Stage::Resolving { spec, logged: false })
            }
            Arrival::Update {
                spec,
                current,
                offload_seeding,
            } => {
                if !idle && life != Lifecycle::Published {
                    return Err(err(ErrorCode::InvalidState, format!("replica is {life:?}, cannot update")));
                }
                let avail = self.update_view(key);
                let Some(v) = resolve_version(spec, avail) else {
                    return Ok(Stage::Finished(Reply::Decision(UpdateDecision::NoChange)));
                };
                if Some(v) == current {
                    return Ok(Stage::Finished(Reply::Decision(UpdateDecision::NoChange)));
                }
                let seed_key = (key.0.clone(), format!("{}+seed", key.1));
                if let Some(seed) = self.replicas.get(&seed_key) {
                    if !self.has_local_source(key, v) {
                        // Either still filling, or holding an older version
                        // that must be released before seeding again.
                        if seed.life == Lifecycle::Published && seed.version < Some(v) {
                            self.revoke(&seed_key, Drain::Release);
                        }
                        return Ok(Stage::Finished(Reply::Decision(UpdateDecision::NoChange)));
                    }
                }
                if offload_seeding && !self.has_local_source(key, v) {
                    self.create_seed(key, &seed_key, v)?;
                    self.enter_assigning(&seed_key, v);
                    return Ok(Stage::Assigning {
                        version: v,
                        target: seed_key,
                        started: BTreeSet::new(),
                    });
                }
                if life == Lifecycle::Published {
                    self.revoke(key, Drain::Txn(op));
                    return Ok(Stage::Draining(Then::Change(v)));
                }
                self.enter_assigning(key, v);
                Ok(Stage::Assigning {
                    version: v,
                    target: key.clone(),
                    started: BTreeSet::new(),
                })
            }
        }
    }

    fn step_publish(&mut self, key: &Key, op: u64, mut checked: BTreeSet<u32>) -> bool {
        let (model, n, last_published) = {
            let r = &self.replicas[key];
            (r.model.clone(), r.num_shards, r.last_published)
        };
        let txn = &self.replicas[key].txns[&op];
        let Arrival::Publish { version: first_v, .. } = txn.arrivals[&txn.order[0]].clone() else {
            unreachable!("publish txn holds publish arrivals")
        };
        let fresh: Vec<(u32, Arrival)> = txn
            .arrivals
            .iter()
            .filter(|(s, _)| !checked.contains(s))
            .map(|(s, a)| (*s, a.clone()))
            .collect();
        if fresh.is_empty() {
            return false;
        }
        for (shard, a) in fresh {
            let Arrival::Publish { version, manifest } = a else { unreachable!() };
            let res = if version != first_v {
                Err(err(
                    ErrorCode::InvalidVersion,
                    format!("shard {shard} publishes {version}, group publishes {first_v}"),
                ))
            } else if last_published.is_some_and(|p| version < p) {
                Err(err(
                    ErrorCode::InvalidVersion,
                    format!("version {version} is older than previously published {}", last_published.unwrap()),
                ))
            } else if let Err(e) = manifest.validate(Some(self.cfg.compaction)) {
                Err(err(ErrorCode::InvalidArgument, e.to_string()))
            } else if self
                .known_manifests
                .get(&(model.clone(), version, n, shard))
                .is_some_and(|d| *d != manifest.digest())
            {
                Err(err(
                    ErrorCode::ManifestConflict,
                    format!("shard {shard} of version {version} differs from an existing replica"),
                ))
            } else {
                Ok(())
            };
            if let Err(e) = res {
                self.events.push(Event::Rejected {
                    replica: key.1.clone(),
                    op: "publish",
                    error: e.to_string(),
                });
                self.set_stage(key, op, Stage::Finished(Reply::Error(e)));
                return true;
            }
            checked.insert(shard);
        }
        if checked.len() < n as usize {
            self.set_stage(key, op, Stage::Collecting { checked });
            return true;
        }
        let r = self.replicas.get_mut(key).expect("replica exists");
        let arrivals = r.txns[&op].arrivals.clone();
        for (shard, a) in arrivals {
            let Arrival::Publish { manifest, .. } = a else { unreachable!() };
            let slot = &mut r.slots[shard as usize];
            slot.state = ShardState::Complete;
            slot.progress = manifest.len() as u64;
            slot.source = None;
            slot.notify = None;
            self.known_manifests
                .entry((model.clone(), first_v, n, shard))
                .or_insert(manifest.digest());
            slot.manifest = Some(manifest);
        }
        r.version = Some(first_v);
        r.life = Lifecycle::Published;
        r.last_published = Some(first_v);
        self.ever_published.entry(model).or_default().insert(first_v);
        self.events.push(Event::Published {
            replica: key.1.clone(),
            version: first_v,
        });
        self.set_stage(key, op, Stage::Finished(Reply::Ack));
        true
    }

    fn step_resolve(&mut self, key: &Key, op: u64, spec: VersionSpec, logged: bool) -> bool {
        let avail = self.global_view(key);
        match resolve_version(spec, avail) {
            Some(v) => {
                self.events.push(Event::Resolved {
                    replica: key.1.clone(),
                    op_seq: op,
                    version: v,
                });
                self.enter_assigning(key, v);
                self.set_stage(
                    key,
                    op,
                    Stage::Assigning {
                        version: v,
                        target: key.clone(),
                        started: BTreeSet::new(),
                    },
                );
                true
            }
            None => {
                if let VersionSpec::Absolute(v) = spec {
                    if self.ever_published.get(&key.0).is_some_and(|s| s.contains(&v)) {
                        let e = err(ErrorCode::VersionUnavailable, format!("version {v} has no remaining replica"));
                        self.events.push(Event::Rejected {
                            replica: key.1.clone(),
                            op: "replicate",
                            error: e.to_string(),
                        });
                        self.set_stage(key, op, Stage::Finished(Reply::Error(e)));
                        return true;
                    }
                }
                if !logged {
                    self.events.push(Event::Blocked {
                        replica: key.1.clone(),
                        op_seq: op,
                    });
                    self.set_stage(key, op, Stage::Resolving { spec, logged: true });
                }
                false
            }
        }
    }

    fn step_drain(&mut self, key: &Key, op: u64, then: Then) -> bool {
        let r = &self.replicas[key];
        if r.drain != Some(Drain::Txn(op)) || self.serving_count(&key.0, &key.1) > 0 {
            return false;
        }
        let v = r.version.expect("published replica has a version");
        self.events.push(Event::Drained {
            replica: key.1.clone(),
            version: v,
        });
        if self.needs_offload(key, v) {
            self.events.push(Event::OffloadRequested {
                replica: key.1.clone(),
                version: v,
            });
            self.set_stage(
                key,
                op,
                Stage::Offloading {
                    version: v,
                    confirmed: BTreeMap::new(),
                    then,
                },
            );
        } else {
            self.finish_unpublish(key);
            self.after_unpublish(key, op, then);
        }
        true
    }

    fn after_unpublish(&mut self, key: &Key, op: u64, then: Then) {
        match then {
            Then::Ack => self.set_stage(key, op, Stage::Finished(Reply::Ack)),
            Then::Change(v) => {
                self.enter_assigning(key, v);
                self.set_stage(
                    key,
                    op,
                    Stage::Assigning {
                        version: v,
                        target: key.clone(),
                        started: BTreeSet::new(),
                    },
                );
            }
        }
    }

    fn step_offload(
        &mut self,
        key: &Key,
        op: u64,
        version: VersionId,
        confirmed: BTreeMap<u32, Waiter>,
        then: Then,
    ) -> bool {
        let n = self.replicas[key].num_shards as usize;
        let txn = self.txn_mut(key, op).expect("txn exists");
        let pending = std::mem::take(&mut txn.pending);
        let mut changed = !pending.is_empty();
        for (_, w) in pending {
            self.reply(w, Reply::Directive(Directive::OffloadFirst { version }));
        }
        if confirmed.len() == n {
            self.create_offload(key, version);
            self.finish_unpublish(key);
            if let Some(txn) = self.txn_mut(key, op) {
                txn.pending = confirmed;
            }
            self.after_unpublish(key, op, then);
            changed = true;
        }
        changed
    }

    fn step_assign(&mut self, key: &Key, op: u64, version: VersionId, target: Key, mut started: BTreeSet<u32>) -> bool {
        let txn = &self.replicas[key].txns[&op];
        let fresh: Vec<u32> = txn.order.iter().copied().filter(|s| !started.contains(s)).collect();
        if fresh.is_empty() {
            return false;
        }
        let Some(t) = self.replicas.get_mut(&target) else {
            return false;
        };
        for shard in fresh {
            let slot = &mut t.slots[shard as usize];
            slot.clear_data();
            slot.state = ShardState::Replicating;
            slot.fill_op = op;
            slot.notify = Some(Notify::Txn {
                owner: key.clone(),
                op,
            });
            started.insert(shard);
        }
        self.set_stage(
            key,
            op,
            Stage::Assigning {
                version,
                target,
                started,
            },
        );
        true
    }

    fn offload_confirm(&mut self, token: Token, ok: bool, op_seq: u64, waiter: Waiter) -> Result<Option<Reply>, ServerError> {
        let (key, shard) = self.lookup_worker(token)?;
        let txn = self
            .txn_mut(&key, op_seq)
            .ok_or_else(|| err(ErrorCode::ProtocolViolation, format!("no operation {op_seq} in progress")))?;
        let Stage::Offloading { version, confirmed, then } = &mut txn.stage else {
            return Err(err(ErrorCode::InvalidState, "no offload was requested"));
        };
        if ok {
            confirmed.insert(shard, waiter);
            return Ok(None);
        }
        let (version, then) = (*version, *then);
        let others: Vec<Waiter> = confirmed.values().copied().collect();
        let e = err(ErrorCode::InvalidState, format!("offload of version {version} failed"));
        txn.stage = Stage::Finished(Reply::Error(e.clone()));
        let _ = then;
        let r = self.replicas.get_mut(&key).expect("replica exists");
        r.life = Lifecycle::Published;
        r.drain = None;
        self.events.push(Event::TxnAborted {
            replica: key.1.clone(),
            op_seq,
            reason: "offload failed".into(),
        });
        self.events.push(Event::Published {
            replica: key.1.clone(),
            version,
        });
        for w in others {
            self.reply(w, Reply::Error(e.clone()));
        }
        Err(e)
    }

    fn abort_txn(&mut self, key: &Key, op: u64, reason: &str) {
        let Some(txn) = self.txn_mut(key, op) else { return };
        let stage = txn.stage.clone();
        let e = err(ErrorCode::GroupAborted, reason.to_string());
        txn.stage = Stage::Finished(Reply::Error(e.clone()));
        self.events.push(Event::TxnAborted {
            replica: key.1.clone(),
            op_seq: op,
            reason: reason.into(),
        });
        match stage {
            Stage::Draining(_) => {
                let r = self.replicas.get_mut(key).expect("replica exists");
                if r.life == Lifecycle::Unpublishing && r.drain == Some(Drain::Txn(op)) {
                    r.life = Lifecycle::Published;
                    r.drain = None;
                }
            }
            Stage::Offloading { confirmed, version, .. } => {
                let r = self.replicas.get_mut(key).expect("replica exists");
                r.life = Lifecycle::Published;
                r.drain = None;
                self.events.push(Event::Published {
                    replica: key.1.clone(),
                    version,
                });
                for w in confirmed.into_values() {
                    self.reply(w, Reply::Error(e.clone()));
                }
            }
            Stage::Assigning { target, .. } => self.void_fill(&target, reason),
            _ => {}
        }
    }

    // ----- failure handling -----------------------------------------------

    fn failure_report(
        &mut self,
        token: Token,
        failed: String,
        kind: FailureKind,
        op_seq: u64,
        waiter: Waiter,
    ) -> Result<Option<Reply>, ServerError> {
        let (key, shard) = self.lookup(token)?;
        let r = &self.replicas[&key];
        let slot = &r.slots[shard as usize];
        if slot.fill_op != op_seq {
            return Err(err(ErrorCode::VersionUnavailable, "fill was voided"));
        }
        match slot.state {
            ShardState::Complete => return Ok(Some(Reply::Ack)),
            ShardState::Empty => return Err(err(ErrorCode::VersionUnavailable, "fill was voided")),
            ShardState::Replicating => {}
        }
        self.events.push(Event::FailureReported {
            reporter: key.1.clone(),
            shard,
            failed: failed.clone(),
            kind,
        });
        if slot.source.as_deref() != Some(failed.as_str()) {
            // Already moved on, e.g. by a reassignment the reporter has not seen.
            if slot.source.is_some() {
                return Ok(Some(Reply::Assignment(self.current_assignment(&key, shard))));
            }
            self.replicas.get_mut(&key).expect("replica exists").slots[shard as usize].notify =
                Some(Notify::Reply(waiter));
            return Ok(None);
        }
        {
            let r = self.replicas.get_mut(&key).expect("replica exists");
            let slot = &mut r.slots[shard as usize];
            slot.source = None;
            slot.notify = Some(Notify::Reply(waiter));
            if kind == FailureKind::Corrupt {
                r.avoid.insert(failed.clone());
            }
        }
        if kind == FailureKind::Unreachable {
            let failed_key = (key.0.clone(), failed);
            if self.replicas.contains_key(&failed_key) {
                self.fail_replica(&failed_key, "reported unreachable");
            }
        }
        Ok(None)
    }

    fn drop_token(&mut self, token: Token, reason: &str) {
        let Some(info) = self.tokens.get(&token).cloned() else { return };
        let key = info.key.clone();
        // Host-memory buffers kept by this handle go with it.
        let hosted: Vec<Key> = self
            .replicas
            .iter()
            .filter(|(_, r)| match &r.kind {
                ReplicaKind::Worker => false,
                ReplicaKind::Offload { host } | ReplicaKind::Seed { host } => {
                    r.model == key.0
                        && *host == key.1
                        && r.slots.iter().any(|s| {
                            s.token == Some(token)
                                || s.token.and_then(|t| self.tokens.get(&t)).and_then(|t| t.parent) == Some(token)
                        })
                }
            })
            .map(|(k, _)| k.clone())
            .collect();
        for h in hosted {
            self.fail_replica(&h, reason);
        }
        let busy = self
            .replicas
            .get(&key)
            .is_some_and(|r| !matches!(r.life, Lifecycle::Registered | Lifecycle::Failed) || !r.txns.is_empty());
        if busy {
            self.fail_replica(&key, reason);
        }
        self.tokens.remove(&token);
        if let Some(r) = self.replicas.get_mut(&key) {
            r.slots[info.shard as usize].token = None;
            if !r.has_tokens() {
                self.replicas.remove(&key);
            }
        }
    }

    /// Evicts a replica at group granularity.
    fn fail_replica(&mut self, key: &Key, reason: &str) {
        let Some(r) = self.replicas.get(key) else { return };
        let name = r.name.clone();
        let is_worker = r.kind == ReplicaKind::Worker;
        self.events.push(Event::ReplicaFailed {
            replica: name.clone(),
            reason: reason.into(),
        });
        if r.life == Lifecycle::Replicating {
            self.events.push(Event::FillVoided {
                replica: name.clone(),
                reason: reason.into(),
            });
        }
        // Readers of the failed replica wait for an alternate source.
        for other in self.replicas.values_mut() {
            if other.model != key.0 {
                continue;
            }
            for slot in &mut other.slots {
                if slot.state == ShardState::Replicating && slot.source.as_deref() == Some(name.as_str()) {
                    slot.source = None;
                    if slot.notify.is_none() {
                        slot.notify = Some(Notify::Push);
                    }
                }
            }
        }
        // Seeding buffers being filled for this replica's transactions.
        let ops: Vec<u64> = self.replicas[key].txns.keys().copied().collect();
        for op in ops {
            let stage = self.replicas[key].txns[&op].stage.clone();
            match stage {
                Stage::Draining(_) | Stage::Offloading { .. } => {
                    let kind = self.replicas[key].txns[&op].kind;
                    if let Stage::Offloading { confirmed, .. } = &stage {
                        for w in confirmed.values() {
                            self.reply(*w, Reply::Error(err(ErrorCode::GroupAborted, reason.to_string())));
                        }
                    }
                    let reply = if kind == TxnKind::Unpublish {
                        Reply::Ack
                    } else {
                        Reply::Error(err(ErrorCode::GroupAborted, reason.to_string()))
                    };
                    self.set_stage(key, op, Stage::Finished(reply));
                }
                Stage::Finished(_) => {}
                Stage::Assigning { ref target, .. } if target != key => {}
                _ => self.abort_txn(key, op, reason),
            }
        }
        if is_worker {
            let r = self.replicas.get_mut(key).expect("replica exists");
            r.reset_data(Lifecycle::Failed);
        } else {
            self.remove_buffer_replica(key);
        }
    }

    /// Drops a fill in progress, e.g. because its version vanished.
    fn void_fill(&mut self, key: &Key, reason: &str) {
        let Some(r) = self.replicas.get_mut(key) else { return };
        if r.life != Lifecycle::Replicating {
            return;
        }
        let e = err(ErrorCode::VersionUnavailable, reason.to_string());
        let mut notify = Vec::new();
        for slot in &mut r.slots {
            if let Some(n) = slot.notify.take() {
                notify.push(n);
            }
        }
        let is_worker = r.kind == ReplicaKind::Worker;
        r.reset_data(Lifecycle::Registered);
        self.events.push(Event::FillVoided {
            replica: key.1.clone(),
            reason: reason.into(),
        });
        for n in notify {
            match n {
                Notify::Reply(w) => self.reply(w, Reply::Error(e.clone())),
                Notify::Txn { owner, op } => {
                    if let Some(txn) = self.txn_mut(&owner, op) {
                        if matches!(txn.stage, Stage::Assigning { .. }) {
                            txn.stage = Stage::Finished(Reply::Error(e.clone()));
                        }
                    }
                }
                Notify::Push => {}
            }
        }
        if !is_worker {
            self.remove_buffer_replica(key);
        }
    }

    fn remove_buffer_replica(&mut self, key: &Key) {
        if let Some(r) = self.replicas.remove(key) {
            if matches!(r.kind, ReplicaKind::Seed { .. }) {
                for s in &r.slots {
                    if let Some(t) = s.token {
                        self.tokens.remove(&t);
                    }
                }
            }
        }
    }

    // ----- scheduling -----------------------------------------------------

    /// In-flight fills (shard granularity) reading from `name`.
    pub fn serving_count(&self, model: &str, name: &str) -> usize {
        self.replicas
            .values()
            .filter(|r| r.model == model)
            .flat_map(|r| r.slots.iter())
            .filter(|s| s.state == ShardState::Replicating && s.source.as_deref() == Some(name))
            .count()
    }

    fn global_view(&self, key: &Key) -> BTreeSet<VersionId> {
        let n = self.replicas[key].num_shards;
        self.replicas
            .values()
            .filter(|r| r.model == key.0 && r.num_shards == n && r.life == Lifecycle::Published)
            .filter_map(|r| r.version)
            .collect()
    }

    /// Versions `update` may move to, with smart skipping applied to the
    /// requester's datacenter.
    fn update_view(&self, key: &Key) -> BTreeSet<VersionId> {
        let global = self.global_view(key);
        if !self.cfg.smart_skipping {
            return global;
        }
        let me = &self.replicas[key];
        let peers = || {
            self.replicas
                .values()
                .filter(|r| r.model == key.0 && r.num_shards == me.num_shards && r.dc == me.dc)
        };
        let local: BTreeSet<VersionId> = peers()
            .filter(|r| r.life == Lifecycle::Published)
            .filter_map(|r| r.version)
            .collect();
        let seeding: BTreeSet<VersionId> = peers()
            .filter(|r| r.life == Lifecycle::Replicating && r.seeding)
            .filter_map(|r| r.version)
            .collect();
        global
            .into_iter()
            .filter(|v| local.contains(v) || !seeding.contains(v))
            .collect()
    }

    fn has_local_source(&self, key: &Key, v: VersionId) -> bool {
        let me = &self.replicas[key];
        self.replicas.values().any(|x| {
            x.model == me.model
                && x.name != me.name
                && x.num_shards == me.num_shards
                && x.dc == me.dc
                && x.version == Some(v)
                && (x.life == Lifecycle::Published || (self.cfg.pipeline && x.life == Lifecycle::Replicating && !x.seeding))
        })
    }

    /// Whether following shard `shard`'s source links from `from` reaches `target`.
    fn chain_reaches(&self, model: &str, from: &str, shard: usize, target: &str) -> bool {
        let mut cur = from.to_string();
        for _ in 0..=self.replicas.len() {
            if cur == target {
                return true;
            }
            let Some(r) = self.replicas.get(&(model.to_string(), cur.clone())) else {
                return false;
            };
            match &r.slots[shard].source {
                Some(next) => cur = next.clone(),
                None => return false,
            }
        }
        true
    }

    fn candidates(&self, key: &Key, shard: usize, v: VersionId, honor_avoid: bool) -> Vec<Key> {
        let me = &self.replicas[key];
        self.replicas
            .values()
            .filter(|x| {
                x.model == me.model
                    && x.name != me.name
                    && x.num_shards == me.num_shards
                    && x.version == Some(v)
                    && !(honor_avoid && me.avoid.contains(&x.name))
            })
            .filter(|x| {
                let s = &x.slots[shard];
                match x.life {
                    Lifecycle::Published => true,
                    Lifecycle::Replicating => {
                        self.cfg.pipeline
                            && x.dc == me.dc
                            && !x.seeding
                            && s.manifest.is_some()
                            && s.state != ShardState::Empty
                            && !self.chain_reaches(&me.model, &x.name, shard, &me.name)
                    }
                    _ => false,
                }
            })
            .map(|x| x.key())
            .collect()
    }

    fn assign(&mut self, key: &Key, shard: usize) -> Option<SourceAssignment> {
        let v = self.replicas[key].version?;
        let mut cands = self.candidates(key, shard, v, true);
        if cands.is_empty() && !self.replicas[key].avoid.is_empty() {
            // Every remaining source was reported corrupt; retry them.
            cands = self.candidates(key, shard, v, false);
        }
        if cands.is_empty() {
            return None;
        }
        let me = &self.replicas[key];
        let own_seed: Vec<Key> = cands
            .iter()
            .filter(|c| matches!(&self.replicas[*c].kind, ReplicaKind::Seed { host } if *host == me.name))
            .cloned()
            .collect();
        let local: Vec<Key> = cands.iter().filter(|c| self.replicas[*c].dc == me.dc).cloned().collect();
        let pool = if !own_seed.is_empty() {
            own_seed
        } else if !local.is_empty() {
            local
        } else {
            cands
        };
        let counted: Vec<(Key, usize)> = pool
            .into_iter()
            .map(|c| {
                let n = self.serving_count(&c.0, &c.1);
                (c, n)
            })
            .collect();
        let (chosen, count) = counted
            .iter()
            .min_by_key(|(c, n)| (*n, self.replicas[c].last_assigned, c.1.clone()))
            .cloned()
            .expect("pool is not empty");

        self.assign_clock += 1;
        let clock = self.assign_clock;
        let src = self.replicas.get_mut(&chosen).expect("candidate exists");
        src.last_assigned = clock;
        let src_slot = &src.slots[shard];
        let manifest = src_slot.manifest.clone().expect("source shard has a manifest");
        let endpoint = src_slot.endpoint.clone();
        let source_complete = src_slot.state == ShardState::Complete;
        let src_dc = src.dc.clone();

        let me = self.replicas.get_mut(key).expect("requester exists");
        let cross_dc = src_dc != me.dc;
        if cross_dc {
            me.seeding = true;
        }
        let slot = &mut me.slots[shard];
        slot.source = Some(chosen.1.clone());
        slot.manifest = Some(manifest.clone());
        let assignment = SourceAssignment {
            version: v,
            shard_idx: shard as u32,
            source_replica: chosen.1.clone(),
            source_endpoint: endpoint,
            source_complete,
            cross_dc,
            manifest,
            op_seq: slot.fill_op,
            token: slot.token.expect("filling shard has a token"),
        };
        self.events.push(Event::Assigned {
            requester: key.1.clone(),
            shard: shard as u32,
            version: v,
            source: chosen.1.clone(),
            source_count: count,
            candidates: counted.into_iter().map(|(k, n)| (k.1, n)).collect(),
            cross_dc,
        });
        Some(assignment)
    }

    fn current_assignment(&self, key: &Key, shard: u32) -> SourceAssignment {
        let r = &self.replicas[key];
        let slot = &r.slots[shard as usize];
        let source = slot.source.clone().expect("slot has a source");
        let src = &self.replicas[&(key.0.clone(), source.clone())];
        let src_slot = &src.slots[shard as usize];
        SourceAssignment {
            version: r.version.expect("filling replica has a version"),
            shard_idx: shard,
            source_replica: source,
            source_endpoint: src_slot.endpoint.clone(),
            source_complete: src_slot.state == ShardState::Complete,
            cross_dc: src.dc != r.dc,
            manifest: slot.manifest.clone().expect("assigned slot has a manifest"),
            op_seq: slot.fill_op,
            token: slot.token.expect("filling shard has a token"),
        }
    }

    fn assign_parked(&mut self) -> bool {
        let mut parked = Vec::new();
        for (key, r) in &self.replicas {
            if r.life != Lifecycle::Replicating {
                continue;
            }
            for (i, s) in r.slots.iter().enumerate() {
                if s.state == ShardState::Replicating && s.source.is_none() {
                    parked.push((key.clone(), i));
                }
            }
        }
        let mut changed = false;
        for (key, shard) in parked {
            let Some(r) = self.replicas.get(&key) else { continue };
            if r.life != Lifecycle::Replicating || r.slots[shard].source.is_some() {
                continue;
            }
            match self.assign(&key, shard) {
                Some(a) => {
                    changed = true;
                    let notify = self.replicas.get_mut(&key).expect("replica exists").slots[shard].notify.take();
                    self.deliver(&key, shard as u32, a, notify);
                }
                None => {
                    let v = self.replicas[&key].version.expect("replicating replica has a version");
                    if !self.version_has_copy(&key, v) {
                        self.void_fill(&key, &format!("no replica of version {v} remains"));
                        changed = true;
                    }
                }
            }
        }
        changed
    }

    /// Whether a complete copy of `v` exists that a fill of `key` could
    /// eventually read, directly or through a pipeline chain.
    fn version_has_copy(&self, key: &Key, v: VersionId) -> bool {
        let me = &self.replicas[key];
        self.replicas.values().any(|x| {
            x.model == me.model
                && x.name != me.name
                && x.num_shards == me.num_shards
                && x.version == Some(v)
                && matches!(x.life, Lifecycle::Published | Lifecycle::Unpublishing)
        })
    }

    fn deliver(&mut self, key: &Key, shard: u32, a: SourceAssignment, notify: Option<Notify>) {
        match notify {
            Some(Notify::Txn { owner, op }) => {
                let Some(txn) = self.txn_mut(&owner, op) else { return };
                let kind = txn.kind;
                let Some(w) = txn.pending.remove(&shard) else { return };
                let seed = owner != *key;
                let (reply, decision) = match kind {
                    TxnKind::Replicate => (Reply::Assignment(a.clone()), format!("replicate v={}", a.version)),
                    _ if seed => (
                        Reply::Decision(UpdateDecision::Seed(a.clone())),
                        format!("seed v={}", a.version),
                    ),
                    _ => (
                        Reply::Decision(UpdateDecision::ChangeTo(a.clone())),
                        format!("change-to v={}", a.version),
                    ),
                };
                self.events.push(Event::Decided {
                    replica: owner.1.clone(),
                    op_seq: op,
                    shard,
                    decision,
                });
                self.reply(w, reply);
                self.maybe_retire(&owner, op);
            }
            Some(Notify::Reply(w)) => self.reply(w, Reply::Assignment(a)),
            Some(Notify::Push) | None => {
                let token = a.token;
                self.push(token, Directive::Reassign(a));
            }
        }
    }

    fn enter_assigning(&mut self, key: &Key, v: VersionId) {
        let r = self.replicas.get_mut(key).expect("replica exists");
        r.reset_data(Lifecycle::Replicating);
        r.version = Some(v);
    }

    // ----- retention and buffers -----------------------------------------

    fn revoke(&mut self, key: &Key, drain: Drain) {
        let r = self.replicas.get_mut(key).expect("replica exists");
        r.life = Lifecycle::Unpublishing;
        r.drain = Some(drain);
        let v = r.version.expect("published replica has a version");
        self.events.push(Event::Revoked {
            replica: key.1.clone(),
            version: v,
        });
    }

    fn finish_unpublish(&mut self, key: &Key) {
        let r = self.replicas.get_mut(key).expect("replica exists");
        let v = r.version.expect("published replica has a version");
        r.reset_data(Lifecycle::Registered);
        self.events.push(Event::Unpublished {
            replica: key.1.clone(),
            version: v,
        });
    }

    /// Versions some live handle of `model` asked to keep.
    pub fn retained(&self, model: &str) -> BTreeSet<VersionId> {
        let mut lags = BTreeSet::new();
        for t in self.tokens.values() {
            if t.parent.is_none() && t.key.0 == model {
                lags.extend(t.retain.lags.iter().copied());
            }
        }
        let published = self.ever_published.get(model).cloned().unwrap_or_default();
        RetentionRule { lags }.retained(&published)
    }

    fn needs_offload(&self, key: &Key, v: VersionId) -> bool {
        let me = &self.replicas[key];
        if me.kind != ReplicaKind::Worker || me.spot || !self.retained(&me.model).contains(&v) {
            return false;
        }
        let other_copy = self.replicas.values().any(|x| {
            x.model == me.model
                && x.name != me.name
                && x.version == Some(v)
                && !x.spot
                && (x.life == Lifecycle::Published
                    || x.txns
                        .values()
                        .any(|t| matches!(t.stage, Stage::Offloading { version, .. } if version == v)))
        });
        !other_copy
    }

    fn create_offload(&mut self, host: &Key, v: VersionId) {
        let base = format!("{}+offload", host.1);
        let name = if self.replicas.contains_key(&(host.0.clone(), base.clone())) {
            format!("{base}-{v}")
        } else {
            base
        };
        let h = &self.replicas[host];
        let slots = h
            .slots
            .iter()
            .map(|s| Slot {
                token: s.token,
                endpoint: s.endpoint.clone(),
                state: ShardState::Complete,
                manifest: s.manifest.clone(),
                progress: s.manifest.as_ref().map_or(0, |m| m.len() as u64),
                source: None,
                fill_op: 0,
                notify: None,
            })
            .collect();
        let r = Replica {
            model: h.model.clone(),
            name: name.clone(),
            kind: ReplicaKind::Offload { host: h.name.clone() },
            num_shards: h.num_shards,
            dc: h.dc.clone(),
            spot: false,
            slots,
            version: Some(v),
            life: Lifecycle::Published,
            drain: None,
            seeding: false,
            last_assigned: 0,
            last_published: Some(v),
            avoid: BTreeSet::new(),
            txns: BTreeMap::new(),
        };
        self.replicas.insert((host.0.clone(), name.clone()), r);
        self.events.push(Event::OffloadCreated { replica: name, version: v });
    }

    fn create_seed(&mut self, host: &Key, seed: &Key, v: VersionId) -> Result<(), ServerError> {
        let h = &self.replicas[host];
        let parents: Vec<Token> = h.slots.iter().filter_map(|s| s.token).collect();
        if parents.len() != h.num_shards as usize {
            return Err(err(ErrorCode::GroupAborted, "not every shard of the group is open"));
        }
        let mut slots = Vec::new();
        for (i, parent) in parents.iter().enumerate() {
            let token = Token(self.next_token);
            self.next_token += 1;
            let info = &self.tokens[parent];
            self.tokens.insert(
                token,
                TokenInfo {
                    client: info.client,
                    key: seed.clone(),
                    shard: i as u32,
                    retain: RetentionRule::none(),
                    lease: self.now,
                    parent: Some(*parent),
                },
            );
            slots.push(Slot::new(Some(token), h.slots[i].endpoint.clone()));
        }
        let r = Replica {
            model: h.model.clone(),
            name: seed.1.clone(),
            kind: ReplicaKind::Seed { host: h.name.clone() },
            num_shards: h.num_shards,
            dc: h.dc.clone(),
            spot: h.spot,
            slots,
            version: Some(v),
            life: Lifecycle::Replicating,
            drain: None,
            seeding: false,
            last_assigned: 0,
            last_published: None,
            avoid: BTreeSet::new(),
            txns: BTreeMap::new(),
        };
        self.replicas.insert(seed.clone(), r);
        self.events.push(Event::SeedCreated {
            replica: seed.1.clone(),
            version: v,
        });
        Ok(())
    }

    fn release_buffers(&mut self) -> bool {
        let mut release = Vec::new();
        for (key, r) in &self.replicas {
            if r.life != Lifecycle::Published {
                continue;
            }
            let v = r.version.expect("published replica has a version");
            let done = match &r.kind {
                ReplicaKind::Worker => false,
                ReplicaKind::Offload { .. } => {
                    !self.retained(&r.model).contains(&v)
                        || self.replicas.values().any(|x| {
                            x.model == r.model
                                && x.kind == ReplicaKind::Worker
                                && !x.spot
                                && x.life == Lifecycle::Published
                                && x.version == Some(v)
                        })
                }
                ReplicaKind::Seed { host } => self
                    .replicas
                    .get(&(r.model.clone(), host.clone()))
                    .is_none_or(|h| h.life == Lifecycle::Published && h.version.is_some_and(|hv| hv >= v)),
            };
            if done {
                release.push(key.clone());
            }
        }
        let changed = !release.is_empty();
        for key in release {
            self.revoke(&key, Drain::Release);
        }
        changed
    }

    fn finish_releases(&mut self) -> bool {
        let done: Vec<Key> = self
            .replicas
            .iter()
            .filter(|(k, r)| r.drain == Some(Drain::Release) && self.serving_count(&k.0, &k.1) == 0)
            .map(|(k, _)| k.clone())
            .collect();
        let changed = !done.is_empty();
        for key in done {
            let r = &self.replicas[&key];
            let v = r.version.expect("released replica has a version");
            let targets: Vec<(Token, u32)> = r
                .slots
                .iter()
                .enumerate()
                .filter_map(|(i, s)| {
                    let t = s.token?;
                    let host = self.tokens.get(&t).and_then(|info| info.parent).unwrap_or(t);
                    Some((host, i as u32))
                })
                .collect();
            for (token, shard) in targets {
                self.push(
                    token,
                    Directive::OffloadRelease {
                        replica: key.1.clone(),
                        shard_idx: shard,
                        version: v,
                    },
                );
            }
            self.events.push(Event::Released {
                replica: key.1.clone(),
                version: v,
            });
            self.remove_buffer_replica(&key);
        }
        changed
    }

    /// Runs parked work to a fixed point.
    pub fn settle(&mut self) {
        for _ in 0..100_000 {
            let mut changed = self.step_all();
            changed |= self.assign_parked();
            changed |= self.release_buffers();
            changed |= self.finish_releases();
            if !changed {
                return;
            }
        }
        panic!("reference server failed to settle");
    }
}
