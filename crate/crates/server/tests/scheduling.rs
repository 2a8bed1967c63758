//! Random request sequences against the state machine, checked against a
//! serving-count ledger kept outside the server.

mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use ros_core::{FailureKind, Reply, Request};
use ros_server::Event;

const ROLLOUTS: usize = 4;
const SHARDS: u32 = 2;

#[derive(Debug, Clone)]
enum Op {
    Replicate(usize),
    Complete(usize, usize),
    Unpublish(usize),
    Report(usize, usize, FailureKind),
    Trainer,
}

fn op() -> impl Strategy<Value = Op> {
    let kind = prop_oneof![Just(FailureKind::Unreachable), Just(FailureKind::NotServing)];
    prop_oneof![
        3 => (1..=ROLLOUTS).prop_map(Op::Replicate),
        4 => (1..=ROLLOUTS, 0..SHARDS as usize).prop_map(|(a, s)| Op::Complete(a, s)),
        1 => (1..=ROLLOUTS).prop_map(Op::Unpublish),
        1 => (1..=ROLLOUTS, 0..SHARDS as usize, kind).prop_map(|(a, s, k)| Op::Report(a, s, k)),
        1 => Just(Op::Trainer),
    ]
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    Idle,
    Filling([bool; 2]),
    Published,
    Unpublishing(u64),
}

#[derive(Debug)]
enum Pending {
    Replicate(usize),
    Complete(usize, usize),
    Report(usize),
    Publish(usize),
}

struct World {
    h: Harness,
    names: Vec<String>,
    shards: Vec<Vec<Shard>>,
    state: Vec<State>,
    pending: Vec<(u64, Pending)>,
    /// (requester, shard) -> source, rebuilt only from what the test observes.
    ledger: BTreeMap<(String, u32), String>,
    trainer_version: u64,
}

impl World {
    fn new(pipeline: bool) -> World {
        let mut h = Harness::with(ros_server::ServerConfig { pipeline, ..config() });
        let mut names = vec!["trainer".to_string()];
        names.extend((1..=ROLLOUTS).map(|i| format!("rollout-{i}")));
        let shards = names.iter().map(|n| h.group(n, SHARDS)).collect();
        let mut w = World {
            h,
            names,
            shards,
            state: vec![State::Idle; ROLLOUTS + 1],
            pending: Vec::new(),
            ledger: BTreeMap::new(),
            trainer_version: 0,
        };
        w.trainer_publish();
        w.settle();
        w
    }

    fn count(&self, name: &str) -> usize {
        self.ledger.values().filter(|s| *s == name).count()
    }

    fn actor(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn trainer_publish(&mut self) {
        self.trainer_version += 1;
        let m = manifest(self.trainer_version as u8, 4);
        for s in 0..SHARDS as usize {
            let mut shard = self.shards[0][s].clone();
            let id = self.h.publish(&mut shard, self.trainer_version, &m);
            self.shards[0][s] = shard;
            self.pending.push((id, Pending::Publish(0)));
        }
        self.state[0] = State::Filling([false; 2]);
    }

    fn unpublish(&mut self, a: usize) {
        let mut ids = Vec::new();
        for s in 0..SHARDS as usize {
            let mut shard = self.shards[a][s].clone();
            ids.push(self.h.unpublish(&mut shard));
            self.shards[a][s] = shard;
        }
        self.state[a] = State::Unpublishing(ids[0]);
        self.pending.push((ids[1], Pending::Publish(usize::MAX)));
    }

    fn apply(&mut self, op: Op) {
        match op {
            Op::Replicate(a) if self.state[a] == State::Idle => {
                for s in 0..SHARDS as usize {
                    let mut shard = self.shards[a][s].clone();
                    let id = self.h.replicate(&mut shard, latest());
                    self.shards[a][s] = shard;
                    self.pending.push((id, Pending::Replicate(a)));
                }
                self.state[a] = State::Filling([false; 2]);
            }
            Op::Complete(a, s) => {
                let assigned = self.ledger.contains_key(&(self.names[a].clone(), s as u32));
                if matches!(self.state[a], State::Filling(done) if !done[s]) && assigned {
                    let shard = self.shards[a][s].clone();
                    let id = self.h.send(
                        shard.client,
                        Request::Complete {
                            token: shard.token,
                            op_seq: shard.op,
                        },
                    );
                    self.pending.push((id, Pending::Complete(a, s)));
                }
            }
            Op::Unpublish(a) if self.state[a] == State::Published => self.unpublish(a),
            Op::Report(a, s, kind) => {
                let Some(source) = self.ledger.get(&(self.names[a].clone(), s as u32)).cloned() else {
                    return;
                };
                if !matches!(self.state[a], State::Filling(done) if !done[s]) {
                    return;
                }
                let shard = self.shards[a][s].clone();
                let id = self.h.send(
                    shard.client,
                    Request::FailureReport {
                        token: shard.token,
                        failed_replica: source,
                        kind,
                        op_seq: shard.op,
                    },
                );
                self.pending.push((id, Pending::Report(a)));
            }
            Op::Trainer => match self.state[0] {
                State::Published => self.unpublish(0),
                State::Idle => self.trainer_publish(),
                _ => {}
            },
            _ => {}
        }
    }

    /// Consumes events and replies, checking every assignment as it is made.
    fn settle(&mut self) {
        // A completion frees its source before anything the same request
        // triggered, so it is applied ahead of the events.
        let pending = std::mem::take(&mut self.pending);
        for (id, p) in pending {
            match p {
                Pending::Complete(a, s) => match self.h.take_reply(id) {
                    Some(Reply::Ack) => {
                        self.ledger.remove(&(self.names[a].clone(), s as u32));
                        if let State::Filling(mut done) = self.state[a] {
                            done[s] = true;
                            self.state[a] = if done.iter().all(|d| *d) { State::Published } else { State::Filling(done) };
                        }
                    }
                    Some(_) => {}
                    None => self.pending.push((id, p)),
                },
                p => self.pending.push((id, p)),
            }
        }
        for e in self.h.server.drain_events() {
            match e {
                Event::Assigned {
                    requester,
                    shard,
                    source,
                    source_count,
                    candidates,
                    ..
                } => {
                    let mut min = usize::MAX;
                    for (name, n) in &candidates {
                        assert_eq!(*n, self.count(name), "server count for {name} disagrees with ledger");
                        min = min.min(*n);
                    }
                    assert_eq!(source_count, self.count(&source));
                    assert_eq!(source_count, min, "{source} was not least loaded among {candidates:?}");
                    // Every published holder of the version is eligible.
                    for (i, st) in self.state.iter().enumerate() {
                        if *st == State::Published && self.names[i] != requester {
                            let holder = &self.names[i];
                            let v = self.h.server.replica(MODEL, holder).and_then(|r| r.version);
                            let want = self.h.server.replica(MODEL, &requester).and_then(|r| r.version);
                            if v == want {
                                assert!(
                                    candidates.iter().any(|(n, _)| n == holder),
                                    "{holder} missing from candidates {candidates:?}"
                                );
                            }
                        }
                    }
                    self.ledger.insert((requester, shard), source);
                }
                Event::FailureReported { reporter, shard, .. } => {
                    self.ledger.remove(&(reporter, shard));
                }
                Event::ReplicaFailed { replica, .. } => {
                    self.ledger.retain(|(r, _), s| *r != replica && *s != replica);
                    if let Some(a) = self.actor(&replica) {
                        if !matches!(self.state[a], State::Unpublishing(_)) {
                            self.state[a] = State::Idle;
                        }
                    }
                }
                Event::FillVoided { replica, .. } => {
                    self.ledger.retain(|(r, _), _| *r != replica);
                    if let Some(a) = self.actor(&replica) {
                        self.state[a] = State::Idle;
                    }
                }
                _ => {}
            }
        }

        let pending = std::mem::take(&mut self.pending);
        for (id, p) in pending {
            let Some(reply) = self.h.take_reply(id) else {
                self.pending.push((id, p));
                continue;
            };
            match (p, reply) {
                (Pending::Publish(0), Reply::Ack) => {
                    if let State::Filling(mut done) = self.state[0] {
                        let s = done.iter().position(|d| !d).unwrap();
                        done[s] = true;
                        self.state[0] = if done.iter().all(|d| *d) { State::Published } else { State::Filling(done) };
                    }
                }
                (Pending::Replicate(a) | Pending::Report(a), Reply::Error(_)) => {
                    if matches!(self.state[a], State::Filling(_)) {
                        self.state[a] = State::Idle;
                    }
                }
                (p, r) => {
                    assert!(
                        matches!(r, Reply::Ack | Reply::Assignment(_) | Reply::Error(_)),
                        "unexpected reply to {p:?}: {r:?}"
                    );
                }
            }
        }
        for a in 0..self.state.len() {
            if let State::Unpublishing(id) = self.state[a] {
                if let Some(reply) = self.h.take_reply(id) {
                    assert_eq!(reply, Reply::Ack);
                    assert_eq!(self.count(&self.names[a]), 0, "ack before readers drained");
                    self.state[a] = State::Idle;
                } else {
                    assert!(self.count(&self.names[a]) > 0, "{} drained but not acked", self.names[a]);
                }
            }
        }
        self.h.pushes_all();
    }
}

fn run(ops: Vec<Op>, pipeline: bool) {
    let mut w = World::new(pipeline);
    for op in ops {
        w.apply(op);
        w.settle();
    }
    for (k, src) in &w.ledger {
        assert!(w.h.server.serving_count(MODEL, src) > 0, "ledger entry {k:?} unknown to server");
    }
    for name in &w.names {
        assert_eq!(w.h.server.serving_count(MODEL, name), w.count(name));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn chosen_source_is_least_loaded(ops in proptest::collection::vec(op(), 1..80)) {
        run(ops, true);
    }

    #[test]
    fn chosen_source_is_least_loaded_without_pipelining(ops in proptest::collection::vec(op(), 1..80)) {
        run(ops, false);
    }
}

#[test]
fn drain_with_one_reader_waits_for_exactly_that_request() {
    let mut h = Harness::new();
    let mut t = h.group("trainer", 1);
    h.publish_group(&mut t, 1, &manifest(1, 4));
    let mut r = h.group("rollout", 1);
    let id = h.replicate(&mut r[0], latest());
    h.reply(id);
    let un = h.unpublish(&mut t[0]);
    let id = h.send(
        r[0].client,
        Request::Progress {
            token: r[0].token,
            progress: 2,
        },
    );
    assert_eq!(h.reply(id), Reply::Ack);
    assert!(h.take_reply(un).is_none());
    assert_eq!(h.complete(&r[0]), Reply::Ack);
    assert_eq!(h.reply(un), Reply::Ack);
}

