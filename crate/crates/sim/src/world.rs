//! The simulated cluster: one reference server (plus an optional backup),
//! shard actors driving [`HandleCore`], and a [`SimNet`] moving their bytes.
//!
//! Everything runs on one thread against a virtual clock. Control messages
//! take no time and are delivered in the order the server emits them; bulk
//! data moves unit by unit through the network model. Tensor contents are
//! one word per entry, equal to the entry's checksum, so every delivered
//! unit is verified without materializing megabytes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use ros_client::{FillJob, HandleCore, Resolution};
use ros_core::{
    digest64, manifest_from_digests, Directive, FailureKind, LocationInfo, Reply, Request, RetentionRule, ShardCoord,
    Token, VersionId, VersionSpec,
};
use ros_server::{ClientId, Outbound, ReferenceServer, ServerConfig};
use ros_transfer::sim::{secs, BandwidthModel, JobId, JobSpec, Nanos, NetEvent, SimNet};
use ros_transfer::Role;

use crate::script::{Action, Script, Step};
use crate::trace::Trace;

/// Corrupt deliveries a fill tolerates, as in the real client.
const CHECKSUM_BUDGET: u32 = 3;

/// One finished fill, the row of a bench report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FillRecord {
    pub actor: String,
    pub role: Role,
    pub version: VersionId,
    /// When the request that produced the fill was sent.
    pub t_start: Nanos,
    pub t_end: Nanos,
    pub bytes: u64,
    /// Source replicas in the order they were used.
    pub sources: Vec<String>,
    pub cross_dc: bool,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct Run {
    pub trace: Trace,
    pub records: Vec<FillRecord>,
    /// Bytes delivered between each ordered pair of datacenters.
    pub dc_bytes: BTreeMap<(String, String), u64>,
    pub end: Nanos,
}

impl Run {
    pub fn cross_dc_bytes(&self) -> u64 {
        self.dc_bytes.iter().filter(|((a, b), _)| a != b).map(|(_, n)| *n).sum()
    }
}

/// Content word of one entry; identical for every holder of the version.
pub fn entry_word(model: &str, shard: u32, name: &str, version: VersionId) -> u64 {
    digest64(format!("{model}/{shard}/{name}/{version}").as_bytes())
}

#[derive(Debug, Clone)]
struct SimSlot {
    version: VersionId,
    content: Vec<u64>,
    serving: bool,
    stream: String,
}

#[derive(Debug, Clone)]
struct Fill {
    job: FillJob,
    net: Option<JobId>,
    src: Option<(usize, Role)>,
    deadline: Option<Nanos>,
    reporting: bool,
    t_start: Nanos,
    bytes: u64,
    sources: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pend {
    Open,
    Publish(VersionId),
    Unpublish,
    Confirm,
    Replicate,
    Update,
    Complete(Role),
    Report(Role),
    List,
    Close,
    Heartbeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Idle,
    Waiting,
    Offloading,
    Filling,
    Polling(Nanos),
}

struct Actor {
    id: String,
    node: String,
    key: String,
    core: HandleCore,
    server: Option<usize>,
    client: Option<ClientId>,
    next_req: u64,
    pending: BTreeMap<u64, Pend>,
    queue: VecDeque<(Nanos, u64, Step)>,
    /// Fault injections; they fire on time whatever the actor is doing.
    faults: VecDeque<(Nanos, u64, Step)>,
    op: Op,
    step: Option<Step>,
    sent_at: Nanos,
    slots: BTreeMap<Role, SimSlot>,
    fills: BTreeMap<Role, Fill>,
    generation: u64,
    crashed: bool,
    halted: bool,
    hb_rejected: bool,
    corrupt_next: u32,
    last_state: String,
}

enum Incoming {
    Reply { req_id: u64, reply: Reply },
    Push { token: Token, directive: Directive },
}

pub struct World {
    now: Nanos,
    cfg: ServerConfig,
    servers: Vec<Option<ReferenceServer>>,
    actors: Vec<Actor>,
    by_endpoint: BTreeMap<String, usize>,
    clients: BTreeMap<ClientId, usize>,
    next_client: ClientId,
    net: SimNet,
    jobs: BTreeMap<JobId, (usize, Role)>,
    inbox: VecDeque<(usize, ClientId, Incoming)>,
    trace: Trace,
    records: Vec<FillRecord>,
    entries: usize,
    entry_bytes: u64,
    detect: Nanos,
    tick: Nanos,
    next_tick: Nanos,
    horizon: Nanos,
    datacenters: BTreeSet<String>,
}

fn server_name(k: usize) -> &'static str {
    if k == 0 {
        "server"
    } else {
        "backup"
    }
}

impl World {
    /// Builds the cluster of a checked script. Groups must already be
    /// linearized.
    pub fn new(script: &Script) -> World {
        let s = &script.server;
        let mut cfg = ServerConfig {
            heartbeat_timeout: Duration::from_secs_f64(s.heartbeat_timeout),
            txn_timeout: Duration::from_secs_f64(s.txn_timeout),
            pipeline: s.pipeline,
            smart_skipping: s.smart_skipping,
            ..ServerConfig::default()
        };
        if let Some(t) = s.compaction_threshold {
            cfg.compaction.threshold = t;
        }
        let servers = (0..if s.backup { 2 } else { 1 }).map(|_| Some(ReferenceServer::new(cfg))).collect();

        let shard_actors = script.shard_actors();
        let mut model = BandwidthModel::new(script.net.local_copy);
        let mut datacenters = BTreeSet::new();
        for n in &script.nodes {
            model.add_node(
                n.name.clone(),
                n.dc.clone(),
                n.up.unwrap_or(script.net.rate),
                n.down.unwrap_or(script.net.rate),
            );
            datacenters.insert(n.dc.clone());
        }
        for a in &shard_actors {
            if !model.nodes.contains_key(&a.node) {
                model.add_node(a.node.clone(), a.dc.clone(), script.net.rate, script.net.rate);
            }
            datacenters.insert(model.datacenter(&a.node).to_string());
        }
        for l in &script.net.links {
            model.link(&l.a, &l.b, l.rate);
        }

        let mut actors = Vec::new();
        let mut by_endpoint = BTreeMap::new();
        for a in shard_actors {
            let key = format!("{}/{}/{}", a.model, a.replica, a.shard);
            let endpoint = format!("sim://{}/{key}", a.node);
            let coord = ShardCoord::new(a.model.clone(), a.replica.clone(), a.num_shards, a.shard);
            let dc = model.datacenter(&a.node).to_string();
            let location = LocationInfo::new(dc, a.spot, endpoint.clone());
            by_endpoint.insert(endpoint, actors.len());
            actors.push(Actor {
                id: a.id,
                node: a.node,
                key,
                core: HandleCore::new(coord, location, RetentionRule::lags(a.retain)),
                server: None,
                client: None,
                next_req: 1,
                pending: BTreeMap::new(),
                queue: VecDeque::new(),
                faults: VecDeque::new(),
                op: Op::Idle,
                step: None,
                sent_at: 0,
                slots: BTreeMap::new(),
                fills: BTreeMap::new(),
                generation: 0,
                crashed: false,
                halted: false,
                hb_rejected: false,
                corrupt_next: 0,
                last_state: "opened".into(),
            });
        }

        let mut timed: Vec<(Nanos, usize, Step)> = Vec::new();
        for (order, step) in script.steps.iter().enumerate() {
            timed.push((secs(step.at), order, step.clone()));
        }
        timed.sort_by_key(|(t, order, _)| (*t, *order));
        let mut last = 0;
        let mut seq = 0;
        for (t, _, step) in timed {
            last = last.max(t);
            for target in script.targets(&step.actor) {
                seq += 1;
                let i = actors.iter().position(|a| a.id == target).expect("checked script");
                if is_fault(step.action) {
                    actors[i].faults.push_back((t, seq, step.clone()));
                } else {
                    actors[i].queue.push_back((t, seq, step.clone()));
                }
            }
        }

        let tick = secs(s.heartbeat_interval).max(1);
        World {
            now: 0,
            cfg,
            servers,
            actors,
            by_endpoint,
            clients: BTreeMap::new(),
            next_client: 1,
            net: SimNet::new(model),
            jobs: BTreeMap::new(),
            inbox: VecDeque::new(),
            trace: Trace::default(),
            records: Vec::new(),
            entries: script.payload.entries,
            entry_bytes: script.payload.entry_bytes,
            detect: secs(script.net.detect_timeout),
            tick,
            next_tick: tick,
            horizon: script.until.map(secs).unwrap_or(last + secs(120.0)),
            datacenters,
        }
    }

    pub fn run(mut self) -> Run {
        loop {
            self.run_ready();
            if !self.active() {
                break;
            }
            let next = self.next_time();
            if next > self.horizon {
                self.now = self.horizon;
                self.trace.push(self.now, "sim", "horizon reached");
                break;
            }
            let events = self.net.advance(next);
            self.now = self.now.max(self.net.now());
            for e in events {
                self.on_net(e);
            }
            self.settle();
            self.fire_timers();
            self.settle();
        }
        self.finish()
    }

    fn finish(mut self) -> Run {
        for i in 0..self.actors.len() {
            let a = &self.actors[i];
            let state = if a.crashed {
                "crashed".to_string()
            } else {
                a.core.state().to_string()
            };
            let c = a.core.coord();
            let text = format!("final {}/{} {state}", c.replica, c.shard_idx);
            let id = a.id.clone();
            self.trace.push(self.now, id, text);
        }
        let mut dc_bytes = BTreeMap::new();
        for a in &self.datacenters {
            for b in &self.datacenters {
                let n = self.net.dc_bytes(a, b);
                if n > 0 {
                    dc_bytes.insert((a.clone(), b.clone()), n);
                }
            }
        }
        Run {
            trace: self.trace,
            records: self.records,
            dc_bytes,
            end: self.now,
        }
    }

    fn active(&self) -> bool {
        self.actors
            .iter()
            .any(|a| {
                !a.crashed && (!a.queue.is_empty() || !a.faults.is_empty() || a.op != Op::Idle || !a.fills.is_empty())
            })
    }

    fn next_time(&self) -> Nanos {
        let mut next = self.next_tick;
        if let Some(t) = self.net.next_event() {
            next = next.min(t);
        }
        for a in self.actors.iter().filter(|a| !a.crashed) {
            if let Some((t, _, _)) = a.faults.front() {
                next = next.min(*t);
            }
            match a.op {
                Op::Idle => {
                    if let Some((t, _, _)) = a.queue.front() {
                        next = next.min(*t);
                    }
                }
                Op::Polling(t) => next = next.min(t),
                _ => {}
            }
            for f in a.fills.values() {
                if let Some(d) = f.deadline.filter(|_| !f.reporting) {
                    next = next.min(d);
                }
            }
        }
        next.max(self.now)
    }

    fn fire_timers(&mut self) {
        for i in 0..self.actors.len() {
            if self.actors[i].crashed {
                continue;
            }
            if let Op::Polling(t) = self.actors[i].op {
                if t <= self.now {
                    let step = self.actors[i].step.clone().expect("polling has a step");
                    self.actors[i].op = Op::Idle;
                    self.update(i, &step);
                    self.settle();
                }
            }
            let due: Vec<Role> = self.actors[i]
                .fills
                .iter()
                .filter(|(_, f)| !f.reporting && f.deadline.is_some_and(|d| d <= self.now))
                .map(|(r, _)| *r)
                .collect();
            for role in due {
                let f = &self.actors[i].fills[&role];
                let text = format!(
                    "source {} silent, reporting it",
                    f.job.assignment().source_replica
                );
                self.log(i, text);
                self.report(i, role, FailureKind::Unreachable);
                self.settle();
            }
        }
        if self.next_tick <= self.now {
            self.next_tick = self.now + self.tick;
            self.heartbeats();
        }
    }

    fn heartbeats(&mut self) {
        for i in 0..self.actors.len() {
            let a = &self.actors[i];
            if a.crashed || a.halted {
                continue;
            }
            if let Some(req) = a.core.heartbeat() {
                self.send(i, req, Pend::Heartbeat);
            }
        }
        let now = Duration::from_nanos(self.now);
        for k in 0..self.servers.len() {
            let Some(server) = self.servers[k].as_mut() else { continue };
            let outs = server.sweep(now);
            self.server_events(k);
            self.route(outs);
        }
        self.settle();
    }

    /// Starts every step whose actor is free and whose time has come.
    /// Runs due steps one at a time in the order the script issued them,
    /// settling the system after each.
    fn run_ready(&mut self) {
        loop {
            let mut best: Option<((Nanos, u64), usize, bool)> = None;
            for (i, a) in self.actors.iter().enumerate() {
                if a.crashed {
                    continue;
                }
                let fault = a.faults.front().filter(|(t, _, _)| *t <= self.now).map(|(t, q, _)| (*t, *q));
                let step = a
                    .queue
                    .front()
                    .filter(|(t, _, _)| *t <= self.now && a.op == Op::Idle)
                    .map(|(t, q, _)| (*t, *q));
                for (key, is_fault) in [(fault, true), (step, false)] {
                    if let Some(k) = key {
                        if best.is_none_or(|(b, _, _)| k < b) {
                            best = Some((k, i, is_fault));
                        }
                    }
                }
            }
            let Some((_, i, is_fault)) = best else { return };
            if is_fault {
                let (_, _, step) = self.actors[i].faults.pop_front().expect("front exists");
                self.fault(i, step);
            } else {
                let (_, _, step) = self.actors[i].queue.pop_front().expect("front exists");
                self.exec(i, step);
            }
            self.settle();
        }
    }

    fn settle(&mut self) {
        loop {
            self.pump();
            if !self.check_sources() {
                return;
            }
        }
    }

    fn log(&mut self, i: usize, text: impl Into<String>) {
        let id = self.actors[i].id.clone();
        self.trace.push(self.now, id, text);
    }

    fn note_state(&mut self, i: usize) {
        let s = self.actors[i].core.state().to_string();
        if s != self.actors[i].last_state {
            self.actors[i].last_state = s.clone();
            self.log(i, format!("state {s}"));
        }
    }

    fn finish_op(&mut self, i: usize) {
        self.actors[i].op = Op::Idle;
        self.actors[i].step = None;
        self.note_state(i);
    }

    fn fail_op(&mut self, i: usize, what: &str, e: impl std::fmt::Display) {
        self.log(i, format!("error: {what}: {e}"));
        self.finish_op(i);
    }

    // ----- control plane -----

    fn server_events(&mut self, k: usize) {
        let Some(server) = self.servers[k].as_mut() else { return };
        for e in server.drain_events() {
            self.trace.push(self.now, server_name(k), e.to_string());
        }
    }

    fn route(&mut self, outs: Vec<Outbound>) {
        for o in outs {
            let (client, msg) = match o {
                Outbound::Reply { client, req_id, reply } => (client, Incoming::Reply { req_id, reply }),
                Outbound::Push {
                    client,
                    token,
                    directive,
                } => (client, Incoming::Push { token, directive }),
            };
            if let Some(&i) = self.clients.get(&client) {
                self.inbox.push_back((i, client, msg));
            }
        }
    }

    /// Sends a request on the actor's session. False if it has none.
    fn send(&mut self, i: usize, req: Request, pend: Pend) -> bool {
        let a = &mut self.actors[i];
        let (Some(k), Some(client)) = (a.server, a.client) else {
            return false;
        };
        let Some(server) = self.servers[k].as_mut() else {
            return false;
        };
        let req_id = a.next_req;
        a.next_req += 1;
        a.pending.insert(req_id, pend);
        let outs = server.handle(Duration::from_nanos(self.now), client, req_id, req);
        self.server_events(k);
        self.route(outs);
        true
    }

    /// Sends a foreground request; a missing session fails the operation.
    fn call(&mut self, i: usize, req: Request, pend: Pend) {
        self.actors[i].op = Op::Waiting;
        if !self.send(i, req, pend) {
            self.fail_op(i, "call", "no server");
        }
    }

    fn pump(&mut self) {
        while let Some((i, client, msg)) = self.inbox.pop_front() {
            if self.actors[i].crashed || self.actors[i].client != Some(client) {
                continue;
            }
            match msg {
                Incoming::Reply { req_id, reply } => {
                    if let Some(p) = self.actors[i].pending.remove(&req_id) {
                        self.on_reply(i, p, reply);
                    }
                }
                Incoming::Push { token, directive } => self.on_push(i, token, directive),
            }
        }
    }

    fn connect(&mut self, i: usize, start: usize) {
        let n = self.servers.len();
        let Some(k) = (0..n).map(|d| (start + d) % n).find(|&k| self.servers[k].is_some()) else {
            self.actors[i].server = None;
            self.actors[i].client = None;
            self.log(i, "no server reachable");
            return;
        };
        let client = self.next_client;
        self.next_client += 1;
        self.clients.insert(client, i);
        self.actors[i].server = Some(k);
        self.actors[i].client = Some(client);
        self.actors[i].hb_rejected = false;
        let req = self.actors[i].core.open_request();
        self.log(i, format!("connect {}", server_name(k)));
        self.send(i, req, Pend::Open);
    }

    fn exec(&mut self, i: usize, step: Step) {
        let mut line = action_name(step.action).to_string();
        if let Some(v) = step.version {
            line.push_str(&format!(" v={v}"));
        }
        if let Some(s) = step.spec {
            line.push_str(&format!(" {s}"));
        }
        if step.seeding {
            line.push_str(" seeding");
        }
        self.log(i, line);
        self.actors[i].step = Some(step.clone());
        match step.action {
            Action::Open => {
                if self.actors[i].client.is_some() {
                    self.fail_op(i, "open", "already open");
                    return;
                }
                self.actors[i].op = Op::Waiting;
                self.connect(i, 0);
                if self.actors[i].client.is_none() {
                    self.finish_op(i);
                }
            }
            Action::Register => {
                let r = self.actors[i].core.register();
                match r {
                    Ok(()) => self.finish_op(i),
                    Err(e) => self.fail_op(i, "register", e),
                }
            }
            Action::Publish => self.publish(i, VersionId(step.version.expect("checked script"))),
            Action::Unpublish => {
                let r = self.actors[i].core.unpublish();
                match r {
                    Ok(req) => self.call(i, req, Pend::Unpublish),
                    Err(e) => self.fail_op(i, "unpublish", e),
                }
            }
            Action::Replicate => {
                let r = self.actors[i].core.replicate(step.spec.unwrap_or(VersionSpec::LATEST));
                match r {
                    Ok(req) => {
                        self.actors[i].sent_at = self.now;
                        self.call(i, req, Pend::Replicate);
                    }
                    Err(e) => self.fail_op(i, "replicate", e),
                }
            }
            Action::Update => self.update(i, &step),
            Action::List => {
                let req = self.actors[i].core.list();
                self.call(i, req, Pend::List);
            }
            Action::Close => {
                let r = self.actors[i].core.close();
                match r {
                    Some(req) => self.call(i, req, Pend::Close),
                    None => self.finish_op(i),
                }
            }
            _ => unreachable!("faults run through fault()"),
        }
    }

    fn fault(&mut self, i: usize, step: Step) {
        self.log(i, action_name(step.action));
        match step.action {
            Action::Crash => {
                let node = self.actors[i].node.clone();
                self.crash(&node);
            }
            Action::HaltHeartbeats => self.actors[i].halted = true,
            Action::PartitionServer => self.failover(i),
            Action::KillServer => match self.actors[i].server {
                Some(k) => self.kill_server(k),
                None => self.log(i, "error: kill-server: not connected"),
            },
            Action::Corrupt => self.actors[i].corrupt_next += step.count.unwrap_or(1),
            _ => unreachable!("not a fault"),
        }
    }

    fn update(&mut self, i: usize, step: &Step) {
        self.actors[i].step = Some(step.clone());
        let r = self.actors[i].core.update(step.spec.unwrap_or(VersionSpec::LATEST), step.seeding);
        match r {
            Ok(req) => {
                self.actors[i].sent_at = self.now;
                self.call(i, req, Pend::Update);
            }
            Err(e) => self.fail_op(i, "update", e),
        }
    }

    fn publish(&mut self, i: usize, v: VersionId) {
        let a = &self.actors[i];
        let c = a.core.coord().clone();
        let described: Vec<(String, u64, u64)> = (0..self.entries)
            .map(|e| {
                let name = format!("t{e:05}");
                let word = entry_word(&c.model, c.shard_idx, &name, v);
                (name, self.entry_bytes, word)
            })
            .collect();
        let manifest = match manifest_from_digests(&described, a.core.compaction()) {
            Ok(m) => m,
            Err(e) => return self.fail_op(i, "publish", e),
        };
        let r = self.actors[i].core.publish(v, manifest.clone());
        let req = match r {
            Ok(req) => req,
            Err(e) => return self.fail_op(i, "publish", e),
        };
        let content = manifest.entries().iter().map(|e| e.checksum).collect();
        let units = manifest.units().len();
        self.install(i, Role::Main, v, content, true);
        let stream = self.actors[i].slots[&Role::Main].stream.clone();
        let node = self.actors[i].node.clone();
        self.net.set_holding(&node, &stream, units);
        self.call(i, req, Pend::Publish(v));
    }

    fn install(&mut self, i: usize, role: Role, version: VersionId, content: Vec<u64>, serving: bool) {
        self.drop_slot(i, role);
        let a = &mut self.actors[i];
        a.generation += 1;
        let stream = format!("{}#{role:?}@{version}.{}", a.key, a.generation);
        a.slots.insert(
            role,
            SimSlot {
                version,
                content,
                serving,
                stream,
            },
        );
    }

    fn drop_slot(&mut self, i: usize, role: Role) {
        if let Some(s) = self.actors[i].slots.remove(&role) {
            let node = self.actors[i].node.clone();
            self.net.drop_stream(&node, &s.stream);
        }
    }

    fn set_serving(&mut self, i: usize, role: Role, on: bool) {
        if let Some(s) = self.actors[i].slots.get_mut(&role) {
            s.serving = on;
        }
    }

    fn on_reply(&mut self, i: usize, p: Pend, reply: Reply) {
        match p {
            Pend::Open => {
                let r = self.actors[i].core.opened(reply);
                match r {
                    Ok(()) => {
                        if self.actors[i].op == Op::Waiting {
                            self.finish_op(i);
                        } else {
                            self.note_state(i);
                        }
                    }
                    Err(e) => self.fail_op(i, "open", e),
                }
            }
            Pend::Publish(v) => {
                let r = self.actors[i].core.published(v, reply);
                match r {
                    Ok(()) => self.finish_op(i),
                    Err(e) => {
                        self.set_serving(i, Role::Main, false);
                        self.fail_op(i, "publish", e)
                    }
                }
            }
            Pend::Unpublish => {
                let r = self.actors[i].core.unpublished(reply);
                match r {
                    Ok(None) => {
                        self.set_serving(i, Role::Main, false);
                        self.finish_op(i);
                    }
                    Ok(Some(v)) => self.offload(i, v),
                    Err(e) => self.fail_op(i, "unpublish", e),
                }
            }
            Pend::Confirm => {
                let r = self.actors[i].core.offload_confirmed(reply);
                match r {
                    Ok(None) => {
                        self.set_serving(i, Role::Main, false);
                        self.finish_op(i);
                    }
                    Ok(Some(res)) => {
                        self.set_serving(i, Role::Main, false);
                        self.resolution(i, res);
                    }
                    Err(e) => {
                        self.drop_slot(i, Role::Offload);
                        self.fail_op(i, "offload", e)
                    }
                }
            }
            Pend::Replicate | Pend::Update => {
                let r = self.actors[i].core.resolved_or_offload(reply);
                match r {
                    Ok(Ok(res)) => self.resolution(i, res),
                    Ok(Err(v)) => self.offload(i, v),
                    Err(e) => {
                        let what = if p == Pend::Replicate { "replicate" } else { "update" };
                        self.fail_op(i, what, e)
                    }
                }
            }
            Pend::Complete(role) => self.completed(i, role, reply),
            Pend::Report(role) => {
                let Some(f) = self.actors[i].fills.get_mut(&role) else { return };
                f.reporting = false;
                let at = f.job.progress();
                match reply {
                    Reply::Assignment(a) => {
                        self.log(i, format!("resume from {} at entry {at}", a.source_replica));
                        let f = self.actors[i].fills.get_mut(&role).expect("fill exists");
                        f.job.reassign(a);
                        self.transfer(i, role);
                    }
                    Reply::Error(e) => self.abort_fill(i, role, &e.to_string()),
                    other => self.abort_fill(i, role, &format!("unexpected reply {other:?}")),
                }
            }
            Pend::List => {
                if let Reply::Listing(l) = reply {
                    let mut text = String::from("listing");
                    for (v, names) in &l {
                        let names: Vec<&str> = names.iter().map(String::as_str).collect();
                        text.push_str(&format!(" {v}:[{}]", names.join(",")));
                    }
                    self.log(i, text);
                }
                self.finish_op(i);
            }
            Pend::Close => {
                for role in [Role::Main, Role::Offload, Role::Seed] {
                    self.drop_slot(i, role);
                }
                if let Reply::Error(e) = reply {
                    self.log(i, format!("error: close: {e}"));
                }
                self.finish_op(i);
            }
            Pend::Heartbeat => {
                if let Reply::Error(e) = reply {
                    if !self.actors[i].hb_rejected {
                        self.actors[i].hb_rejected = true;
                        self.log(i, format!("heartbeat rejected: {e}"));
                    }
                }
            }
        }
    }

    fn resolution(&mut self, i: usize, res: Resolution) {
        match res {
            Resolution::Fill(a) => {
                self.log(
                    i,
                    format!("fill v={} from {} cross_dc={}", a.version, a.source_replica, a.cross_dc),
                );
                let zeros = vec![0; a.manifest.len()];
                self.install(i, Role::Main, a.version, zeros, true);
                self.start_fill(i, Role::Main, FillJob::new(a), self.actors[i].sent_at);
                self.actors[i].op = Op::Filling;
                self.note_state(i);
                self.transfer(i, Role::Main);
            }
            Resolution::NoChange => {
                self.log(i, "no change");
                self.keep_polling(i);
            }
            Resolution::Seed(a) => {
                self.log(i, format!("seed v={} from {}", a.version, a.source_replica));
                let zeros = vec![0; a.manifest.len()];
                self.install(i, Role::Seed, a.version, zeros, false);
                self.start_fill(i, Role::Seed, FillJob::new(a), self.now);
                self.transfer(i, Role::Seed);
                self.keep_polling(i);
            }
        }
    }

    fn keep_polling(&mut self, i: usize) {
        match self.actors[i].step.as_ref().and_then(|s| s.poll) {
            Some(p) if self.actors[i].op == Op::Waiting => {
                self.actors[i].op = Op::Polling(self.now + secs(p));
                self.note_state(i);
            }
            _ => self.finish_op(i),
        }
    }

    fn offload(&mut self, i: usize, v: VersionId) {
        let Some(main) = self.actors[i].slots.get(&Role::Main).filter(|s| s.version == v).cloned() else {
            let r = self.actors[i].core.offload_confirm(false);
            self.log(i, format!("cannot offload v={v}"));
            if let Ok(req) = r {
                self.call(i, req, Pend::Confirm);
            }
            return;
        };
        self.log(i, format!("offloading v={v}"));
        self.install(i, Role::Offload, v, main.content.clone(), false);
        let a = &self.actors[i];
        let m = a.core.coord();
        let units = self.unit_lens(m.model.clone(), m.shard_idx, v);
        let spec = JobSpec {
            src: a.node.clone(),
            src_stream: main.stream.clone(),
            dst: a.node.clone(),
            dst_stream: a.slots[&Role::Offload].stream.clone(),
            units,
            start: 0,
        };
        let job = self.net.start(spec);
        self.jobs.insert(job, (i, Role::Offload));
        self.actors[i].op = Op::Offloading;
    }

    /// Unit lengths of a shard version, as the publisher built it.
    fn unit_lens(&self, model: String, shard: u32, v: VersionId) -> Vec<u64> {
        let described: Vec<(String, u64, u64)> = (0..self.entries)
            .map(|e| {
                let name = format!("t{e:05}");
                let word = entry_word(&model, shard, &name, v);
                (name, self.entry_bytes, word)
            })
            .collect();
        manifest_from_digests(&described, self.cfg.compaction)
            .expect("payload is valid")
            .units()
            .iter()
            .map(|u| u.len)
            .collect()
    }

    fn on_push(&mut self, i: usize, _token: Token, d: Directive) {
        match d {
            Directive::Reassign(a) => {
                let role = self.actors[i].fills.iter().find_map(|(r, f)| {
                    let cur = f.job.assignment();
                    (cur.token == a.token && cur.op_seq == a.op_seq && cur.version == a.version).then_some(*r)
                });
                let Some(role) = role else { return };
                self.log(i, format!("reassigned to {}", a.source_replica));
                self.stop_transfer(i, role);
                let f = self.actors[i].fills.get_mut(&role).expect("fill exists");
                f.job.reassign(a);
                if !f.reporting {
                    self.transfer(i, role);
                }
            }
            Directive::OffloadRelease { replica, version, .. } => {
                let role = if replica.ends_with("+seed") { Role::Seed } else { Role::Offload };
                if self.actors[i].slots.get(&role).is_some_and(|s| s.version == version) {
                    self.drop_slot(i, role);
                    self.log(i, format!("dropped {replica} v={version}"));
                }
            }
            Directive::OffloadFirst { version } => self.log(i, format!("unsolicited offload request v={version}")),
        }
    }

    // ----- data plane -----

    fn start_fill(&mut self, i: usize, role: Role, job: FillJob, t_start: Nanos) {
        self.actors[i].fills.insert(
            role,
            Fill {
                job,
                net: None,
                src: None,
                deadline: None,
                reporting: false,
                t_start,
                bytes: 0,
                sources: Vec::new(),
            },
        );
    }

    /// The slot of `si` that backs replica `name`. Offload and seed
    /// replicas live beside the main slot under suffixed names.
    fn source_slot(&self, si: usize, name: &str, v: VersionId) -> Option<Role> {
        let role = if name.ends_with("+seed") {
            Role::Seed
        } else if name.ends_with("+offload") {
            Role::Offload
        } else {
            Role::Main
        };
        self.actors[si]
            .slots
            .get(&role)
            .is_some_and(|s| s.version == v && s.serving)
            .then_some(role)
    }

    /// (Re)starts pulling the rest of a fill from its assigned source.
    fn transfer(&mut self, i: usize, role: Role) {
        let f = &self.actors[i].fills[&role];
        let a = f.job.assignment().clone();
        let src = self.by_endpoint.get(&a.source_endpoint).copied();
        let found = src.and_then(|si| self.source_slot(si, &a.source_replica, a.version).map(|r| (si, r)));
        let src_dead = src.is_some_and(|si| self.actors[si].crashed);
        let f = self.actors[i].fills.get_mut(&role).expect("fill exists");
        if f.sources.last() != Some(&a.source_replica) {
            f.sources.push(a.source_replica.clone());
        }
        let Some((si, srole)) = found else {
            if src_dead {
                // A dead peer looks the same as a silent one.
                f.src = src.map(|si| (si, Role::Main));
                f.deadline = Some(self.now + self.detect);
                return;
            }
            self.log(i, format!("source {} is not serving", a.source_replica));
            self.report(i, role, FailureKind::NotServing);
            return;
        };
        let units: Vec<u64> = f.job.units().iter().map(|u| u.len).collect();
        let start = f.job.units_done();
        let spec = JobSpec {
            src: self.actors[si].node.clone(),
            src_stream: self.actors[si].slots[&srole].stream.clone(),
            dst: self.actors[i].node.clone(),
            dst_stream: self.actors[i].slots[&role].stream.clone(),
            units,
            start,
        };
        let dead = self.actors[si].crashed;
        let job = self.net.start(spec);
        self.jobs.insert(job, (i, role));
        let f = self.actors[i].fills.get_mut(&role).expect("fill exists");
        f.net = Some(job);
        f.src = Some((si, srole));
        f.deadline = dead.then_some(self.now + self.detect);
    }

    fn stop_transfer(&mut self, i: usize, role: Role) {
        let Some(f) = self.actors[i].fills.get_mut(&role) else { return };
        f.deadline = None;
        if let Some(job) = f.net.take() {
            self.jobs.remove(&job);
            self.net.cancel(job);
        }
    }

    fn report(&mut self, i: usize, role: Role, kind: FailureKind) {
        self.stop_transfer(i, role);
        let f = self.actors[i].fills.get_mut(&role).expect("fill exists");
        f.reporting = true;
        let a = f.job.assignment().clone();
        let req = self.actors[i].core.report(&a, kind);
        if !self.send(i, req, Pend::Report(role)) {
            self.abort_fill(i, role, "no server");
        }
    }

    fn abort_fill(&mut self, i: usize, role: Role, why: &str) {
        self.stop_transfer(i, role);
        self.actors[i].fills.remove(&role);
        self.drop_slot(i, role);
        match role {
            Role::Main => {
                self.actors[i].core.fill_aborted();
                self.fail_op(i, "fill", why);
            }
            _ => self.log(i, format!("error: {role:?} fill: {why}")),
        }
    }

    /// Readers whose source stopped serving report it; readers of a dead
    /// source start their timeout. True if anything was reported.
    fn check_sources(&mut self) -> bool {
        let mut changed = false;
        for i in 0..self.actors.len() {
            if self.actors[i].crashed {
                continue;
            }
            let roles: Vec<Role> = self.actors[i].fills.keys().copied().collect();
            for role in roles {
                let f = &self.actors[i].fills[&role];
                if f.reporting {
                    continue;
                }
                let Some((si, srole)) = f.src else { continue };
                let v = f.job.assignment().version;
                if self.actors[si].crashed {
                    if f.deadline.is_none() {
                        let d = self.now + self.detect;
                        self.actors[i].fills.get_mut(&role).expect("fill exists").deadline = Some(d);
                    }
                    continue;
                }
                let ok = self.actors[si].slots.get(&srole).is_some_and(|s| s.version == v && s.serving);
                if !ok {
                    let text = format!("source {} stopped serving", f.job.assignment().source_replica);
                    self.log(i, text);
                    self.report(i, role, FailureKind::NotServing);
                    changed = true;
                }
            }
        }
        changed
    }

    fn on_net(&mut self, e: NetEvent) {
        match e {
            NetEvent::Delivered { job, unit, .. } => {
                let Some(&(i, role)) = self.jobs.get(&job) else { return };
                if role == Role::Offload {
                    return;
                }
                self.delivered(i, role, unit);
            }
            NetEvent::Finished { job, .. } => {
                let Some((i, role)) = self.jobs.remove(&job) else { return };
                if role == Role::Offload {
                    let v = self.actors[i].slots.get(&Role::Offload).map(|s| s.version);
                    self.set_serving(i, Role::Offload, true);
                    if let Some(v) = v {
                        self.log(i, format!("offloaded v={v}"));
                    }
                    let r = self.actors[i].core.offload_confirm(true);
                    match r {
                        Ok(req) => self.call(i, req, Pend::Confirm),
                        Err(e) => self.fail_op(i, "offload", e),
                    }
                    return;
                }
                let f = self.actors[i].fills.get_mut(&role).expect("fill exists");
                f.net = None;
                if f.job.is_done() {
                    let a = f.job.assignment().clone();
                    let req = self.actors[i].core.complete(&a);
                    if !self.send(i, req, Pend::Complete(role)) {
                        self.abort_fill(i, role, "no server");
                    }
                }
            }
        }
    }

    fn delivered(&mut self, i: usize, role: Role, unit: usize) {
        let f = &self.actors[i].fills[&role];
        debug_assert_eq!(unit, f.job.units_done());
        let u = f.job.units()[unit].clone();
        let (si, srole) = f.src.expect("transfer has a source");
        let a = f.job.assignment().clone();
        let mut words: Vec<u64> = match self.actors[si].slots.get(&srole) {
            Some(s) if s.version == a.version => s.content[u.entries.clone()].to_vec(),
            _ => vec![0; u.entries.len()],
        };
        if self.actors[si].corrupt_next > 0 {
            self.actors[si].corrupt_next -= 1;
            words[0] ^= 1;
            self.log(si, format!("flipped a bit of entry {} for {}", u.entries.start, self.actors[i].id));
        }
        let bad = u
            .entries
            .clone()
            .zip(&words)
            .find(|(e, w)| a.manifest.entries()[*e].checksum != **w)
            .map(|(e, _)| e);
        if let Some(entry) = bad {
            self.stop_transfer(i, role);
            let node = self.actors[i].node.clone();
            let stream = self.actors[i].slots[&role].stream.clone();
            self.net.set_holding(&node, &stream, unit);
            self.log(i, format!("checksum mismatch at entry {entry} from {}", a.source_replica));
            let f = self.actors[i].fills.get_mut(&role).expect("fill exists");
            match f.job.note_corrupt(entry, CHECKSUM_BUDGET) {
                Ok(()) => self.report(i, role, FailureKind::Corrupt),
                Err(e) => self.abort_fill(i, role, &e.to_string()),
            }
            return;
        }
        let slot = self.actors[i].slots.get_mut(&role).expect("filling slot exists");
        slot.content[u.entries.clone()].copy_from_slice(&words);
        let f = self.actors[i].fills.get_mut(&role).expect("fill exists");
        f.job.accept_virtual(u.entries.clone()).expect("units arrive in order");
        f.bytes += u.len;
        f.deadline = None;
    }

    fn completed(&mut self, i: usize, role: Role, reply: Reply) {
        let Some(f) = self.actors[i].fills.remove(&role) else { return };
        let a = f.job.assignment().clone();
        let ok = match role {
            Role::Main => {
                let r = self.actors[i].core.filled(&a, reply);
                match r {
                    Ok(()) => true,
                    Err(e) => {
                        self.drop_slot(i, role);
                        self.fail_op(i, "complete", e);
                        false
                    }
                }
            }
            _ => match reply {
                Reply::Ack => {
                    self.set_serving(i, role, true);
                    self.log(i, format!("seeded v={}", a.version));
                    true
                }
                other => {
                    self.drop_slot(i, role);
                    self.log(i, format!("error: seed complete: {other:?}"));
                    false
                }
            },
        };
        if !ok {
            return;
        }
        self.records.push(FillRecord {
            actor: self.actors[i].id.clone(),
            role,
            version: a.version,
            t_start: f.t_start,
            t_end: self.now,
            bytes: f.bytes,
            sources: f.sources,
            cross_dc: a.cross_dc,
        });
        if role == Role::Main {
            self.finish_op(i);
        }
    }

    // ----- faults -----

    fn crash(&mut self, node: &str) {
        self.net.kill(node);
        for i in 0..self.actors.len() {
            if self.actors[i].node != node || self.actors[i].crashed {
                continue;
            }
            let roles: Vec<Role> = self.actors[i].fills.keys().copied().collect();
            for role in roles {
                self.stop_transfer(i, role);
            }
            let a = &mut self.actors[i];
            a.crashed = true;
            a.fills.clear();
            a.pending.clear();
            a.queue.clear();
            a.faults.clear();
            a.op = Op::Idle;
            self.log(i, "crashed");
        }
    }

    fn kill_server(&mut self, k: usize) {
        self.servers[k] = None;
        self.trace.push(self.now, server_name(k), "killed");
        for i in 0..self.actors.len() {
            if !self.actors[i].crashed && self.actors[i].server == Some(k) {
                self.failover(i);
            }
        }
    }

    /// Drops the session and everything that depended on it, then
    /// reconnects to the next server.
    fn failover(&mut self, i: usize) {
        self.log(i, "connection lost");
        let roles: Vec<Role> = self.actors[i].fills.keys().copied().collect();
        for role in roles {
            self.stop_transfer(i, role);
            self.actors[i].fills.remove(&role);
            if role != Role::Main || self.actors[i].core.state() == ros_client::HandleState::Replicating {
                self.drop_slot(i, role);
            }
        }
        self.jobs.retain(|_, (a, _)| *a != i);
        self.drop_slot(i, Role::Offload);
        self.drop_slot(i, Role::Seed);
        self.set_serving(i, Role::Main, false);
        self.actors[i].core.reset_session();
        self.actors[i].pending.clear();
        if let Some(c) = self.actors[i].client.take() {
            self.clients.remove(&c);
        }
        if self.actors[i].op != Op::Idle {
            self.fail_op(i, "operation", "failed over");
        }
        self.note_state(i);
        let start = self.actors[i].server.map_or(0, |k| k + 1);
        self.connect(i, start);
    }
}

fn is_fault(a: Action) -> bool {
    matches!(
        a,
        Action::Crash | Action::HaltHeartbeats | Action::PartitionServer | Action::KillServer | Action::Corrupt
    )
}

fn action_name(a: Action) -> &'static str {
    match a {
        Action::Open => "open",
        Action::Register => "register",
        Action::Publish => "publish",
        Action::Unpublish => "unpublish",
        Action::Replicate => "replicate",
        Action::Update => "update",
        Action::List => "list",
        Action::Close => "close",
        Action::Crash => "crash",
        Action::HaltHeartbeats => "halt-heartbeats",
        Action::PartitionServer => "partition-server",
        Action::KillServer => "kill-server",
        Action::Corrupt => "corrupt",
    }
}
