#![allow(dead_code)]

use std::time::Duration;

use ros_core::{
    build_manifest, CompactionConfig, Directive, ErrorCode, LocationInfo, Reply, Request, RetentionRule, ShardCoord,
    SourceAssignment, TensorManifest, Token, UpdateDecision, VersionId, VersionSpec,
};
use ros_server::{ClientId, Outbound, ReferenceServer, ServerConfig};

pub const MODEL: &str = "actor";

/// A shard handle as seen from the test: its token, client and op counter.
#[derive(Debug, Clone)]
pub struct Shard {
    pub replica: String,
    pub idx: u32,
    pub token: Token,
    pub client: ClientId,
    pub op: u64,
}

pub struct Harness {
    pub server: ReferenceServer,
    pub now: Duration,
    next_req: u64,
    next_client: ClientId,
    /// Frames produced but not yet claimed by a test.
    pub inbox: Vec<Outbound>,
}

pub fn manifest(seed: u8, n: usize) -> TensorManifest {
    let tensors: Vec<(String, Vec<u8>)> = (0..n).map(|i| (format!("w{i}"), vec![seed.wrapping_add(i as u8); 64])).collect();
    build_manifest(&tensors, CompactionConfig::with_threshold(8)).unwrap()
}

pub fn config() -> ServerConfig {
    ServerConfig {
        compaction: CompactionConfig::with_threshold(8),
        ..ServerConfig::default()
    }
}

impl Harness {
    pub fn new() -> Self {
        Harness::with(config())
    }

    pub fn with(cfg: ServerConfig) -> Self {
        Harness {
            server: ReferenceServer::new(cfg),
            now: Duration::ZERO,
            next_req: 1,
            next_client: 1,
            inbox: Vec::new(),
        }
    }

    pub fn advance(&mut self, d: Duration) {
        self.now += d;
        let out = self.server.sweep(self.now);
        self.inbox.extend(out);
    }

    /// Sends a request and returns its request id.
    pub fn send(&mut self, client: ClientId, req: Request) -> u64 {
        let id = self.next_req;
        self.next_req += 1;
        let out = self.server.handle(self.now, client, id, req);
        self.inbox.extend(out);
        id
    }

    /// Removes and returns the reply to `req_id`, if it has been sent.
    pub fn take_reply(&mut self, req_id: u64) -> Option<Reply> {
        let pos = self
            .inbox
            .iter()
            .position(|o| matches!(o, Outbound::Reply { req_id: r, .. } if *r == req_id))?;
        match self.inbox.remove(pos) {
            Outbound::Reply { reply, .. } => Some(reply),
            _ => unreachable!(),
        }
    }

    pub fn reply(&mut self, req_id: u64) -> Reply {
        self.take_reply(req_id).unwrap_or_else(|| panic!("no reply to request {req_id}"))
    }

    pub fn pushes(&mut self, token: Token) -> Vec<Directive> {
        let mut out = Vec::new();
        self.inbox.retain(|o| match o {
            Outbound::Push { token: t, directive, .. } if *t == token => {
                out.push(directive.clone());
                false
            }
            _ => true,
        });
        out
    }

    /// Discards every pushed directive.
    pub fn pushes_all(&mut self) {
        self.inbox.retain(|o| !matches!(o, Outbound::Push { .. }));
    }

    pub fn try_open(&mut self, replica: &str, n: u32, idx: u32, dc: &str, spot: bool, retain: RetentionRule) -> Reply {
        let client = self.next_client;
        self.next_client += 1;
        let id = self.send(
            client,
            Request::Open {
                coord: ShardCoord::new(MODEL, replica, n, idx),
                location: LocationInfo::new(dc, spot, format!("mem://{replica}/{idx}")),
                retain,
            },
        );
        self.reply(id)
    }

    pub fn open_in(&mut self, replica: &str, n: u32, idx: u32, dc: &str, spot: bool, retain: RetentionRule) -> Shard {
        let client = self.next_client;
        match self.try_open(replica, n, idx, dc, spot, retain) {
            Reply::Opened { token, .. } => Shard {
                replica: replica.into(),
                idx,
                token,
                client,
                op: 0,
            },
            other => panic!("open {replica}/{idx}: {other:?}"),
        }
    }

    pub fn open(&mut self, replica: &str, n: u32, idx: u32) -> Shard {
        self.open_in(replica, n, idx, "dc1", false, RetentionRule::none())
    }

    pub fn group(&mut self, replica: &str, n: u32) -> Vec<Shard> {
        (0..n).map(|i| self.open(replica, n, i)).collect()
    }

    pub fn publish(&mut self, s: &mut Shard, v: u64, m: &TensorManifest) -> u64 {
        s.op += 1;
        self.send(
            s.client,
            Request::Publish {
                token: s.token,
                version: VersionId(v),
                manifest: m.clone(),
                op_seq: s.op,
            },
        )
    }

    /// Publishes every shard and asserts success.
    pub fn publish_group(&mut self, g: &mut [Shard], v: u64, m: &TensorManifest) {
        let ids: Vec<u64> = g.iter_mut().map(|s| self.publish(s, v, m)).collect();
        for id in ids {
            assert_eq!(self.reply(id), Reply::Ack);
        }
    }

    pub fn unpublish(&mut self, s: &mut Shard) -> u64 {
        s.op += 1;
        self.send(s.client, Request::Unpublish { token: s.token, op_seq: s.op })
    }

    pub fn replicate(&mut self, s: &mut Shard, spec: VersionSpec) -> u64 {
        s.op += 1;
        self.send(
            s.client,
            Request::Replicate {
                token: s.token,
                spec,
                op_seq: s.op,
            },
        )
    }

    pub fn update(&mut self, s: &mut Shard, spec: VersionSpec, current: Option<u64>, seeding: bool) -> u64 {
        s.op += 1;
        self.send(
            s.client,
            Request::Update {
                token: s.token,
                spec,
                current: current.map(VersionId),
                op_seq: s.op,
                offload_seeding: seeding,
            },
        )
    }

    pub fn complete(&mut self, s: &Shard) -> Reply {
        let id = self.send(s.client, Request::Complete { token: s.token, op_seq: s.op });
        self.reply(id)
    }

    pub fn complete_token(&mut self, client: ClientId, token: Token, op_seq: u64) -> Reply {
        let id = self.send(client, Request::Complete { token, op_seq });
        self.reply(id)
    }

    pub fn heartbeat(&mut self, s: &Shard) {
        let id = self.send(s.client, Request::Heartbeat { token: s.token });
        assert_eq!(self.reply(id), Reply::Ack);
    }

    pub fn list(&mut self) -> Vec<(u64, Vec<String>)> {
        self.server
            .list(MODEL)
            .into_iter()
            .map(|(v, names)| (v.0, names.into_iter().collect()))
            .collect()
    }
}

pub fn assignment(r: Reply) -> SourceAssignment {
    match r {
        Reply::Assignment(a) => a,
        Reply::Decision(UpdateDecision::ChangeTo(a)) => a,
        other => panic!("expected an assignment, got {other:?}"),
    }
}

pub fn error_code(r: Reply) -> ErrorCode {
    match r {
        Reply::Error(e) => e.code,
        other => panic!("expected an error, got {other:?}"),
    }
}

pub fn latest() -> VersionSpec {
    VersionSpec::LATEST
}
