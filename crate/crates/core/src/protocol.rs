//! Control-plane messages exchanged between shard handles and the reference
//! server, and their frame encoding.
//!
//! Every frame is `length: u32 BE | type: u8 | body`, where `length` counts
//! the type byte plus the body and the body is a canonical field-tagged
//! record (see [`crate::codec`]). The byte layout of each body is listed in
//! `docs/protocol.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Read, Write};

use crate::codec::{require, Decoder, Encoder, Field, Wire};
use crate::error::{Error, Result};
use crate::manifest::{CompactionConfig, TensorManifest};
use crate::naming::{LocationInfo, RetentionRule, ShardCoord};
use crate::version::{VersionId, VersionSpec};

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME: usize = 64 << 20;

/// Server-issued identifier of one open shard handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token(pub u64);

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// version -> names of replicas currently visible under it.
pub type Listing = BTreeMap<VersionId, BTreeSet<String>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FailureKind {
    /// Connection loss or timeout; the source is presumed dead.
    Unreachable = 1,
    /// A received entry failed its checksum.
    Corrupt = 2,
    /// The source answered but no longer serves the version.
    NotServing = 3,
}

impl FailureKind {
    fn from_u64(v: u64) -> Result<Self> {
        match v {
            1 => Ok(FailureKind::Unreachable),
            2 => Ok(FailureKind::Corrupt),
            3 => Ok(FailureKind::NotServing),
            _ => Err(Error::decode(format!("unknown failure kind {v}"))),
        }
    }
}

/// Where one receiving shard should pull a version from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceAssignment {
    pub version: VersionId,
    pub shard_idx: u32,
    pub source_replica: String,
    pub source_endpoint: String,
    /// False when the source is itself still filling (pipeline source).
    pub source_complete: bool,
    pub cross_dc: bool,
    pub manifest: TensorManifest,
    pub op_seq: u64,
    /// Token the receiver uses to report progress and completion. This is the
    /// receiving handle's own token, or a seeding buffer's token.
    pub token: Token,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpdateDecision {
    NoChange,
    ChangeTo(SourceAssignment),
    /// Fill a host-memory seeding buffer in the background; the handle keeps
    /// its current version for now.
    Seed(SourceAssignment),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    /// Copy registered regions to host memory and confirm before the
    /// unpublish can complete.
    OffloadFirst { version: VersionId },
    /// An offload buffer is no longer needed.
    OffloadRelease {
        replica: String,
        shard_idx: u32,
        version: VersionId,
    },
    /// The current source was evicted; continue from this one.
    Reassign(SourceAssignment),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    AlreadyOpen = 1,
    InvalidGroup = 2,
    InvalidVersion = 3,
    ManifestConflict = 4,
    InvalidState = 5,
    VersionUnavailable = 6,
    ProtocolViolation = 7,
    GroupAborted = 8,
    UnknownHandle = 9,
    InvalidArgument = 10,
}

impl ErrorCode {
    fn from_u64(v: u64) -> Result<Self> {
        use ErrorCode::*;
        Ok(match v {
            1 => AlreadyOpen,
            2 => InvalidGroup,
            3 => InvalidVersion,
            4 => ManifestConflict,
            5 => InvalidState,
            6 => VersionUnavailable,
            7 => ProtocolViolation,
            8 => GroupAborted,
            9 => UnknownHandle,
            10 => InvalidArgument,
            _ => return Err(Error::decode(format!("unknown error code {v}"))),
        })
    }

    /// Errors after which repeating the same group operation may succeed.
    pub fn is_retryable(self) -> bool {
        matches!(self, ErrorCode::GroupAborted | ErrorCode::VersionUnavailable)
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCode::AlreadyOpen => "already-open",
            ErrorCode::InvalidGroup => "invalid-group",
            ErrorCode::InvalidVersion => "invalid-version",
            ErrorCode::ManifestConflict => "manifest-conflict",
            ErrorCode::InvalidState => "invalid-state",
            ErrorCode::VersionUnavailable => "version-unavailable",
            ErrorCode::ProtocolViolation => "protocol-violation",
            ErrorCode::GroupAborted => "group-aborted",
            ErrorCode::UnknownHandle => "unknown-handle",
            ErrorCode::InvalidArgument => "invalid-argument",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ServerError {
    pub code: ErrorCode,
    pub message: String,
}

impl ServerError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerError {
            code,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Open {
        coord: ShardCoord,
        location: LocationInfo,
        retain: RetentionRule,
    },
    Publish {
        token: Token,
        version: VersionId,
        manifest: TensorManifest,
        op_seq: u64,
    },
    Unpublish {
        token: Token,
        op_seq: u64,
    },
    Replicate {
        token: Token,
        spec: VersionSpec,
        op_seq: u64,
    },
    Update {
        token: Token,
        spec: VersionSpec,
        current: Option<VersionId>,
        op_seq: u64,
        offload_seeding: bool,
    },
    Progress {
        token: Token,
        progress: u64,
    },
    Complete {
        token: Token,
        op_seq: u64,
    },
    List {
        model: String,
    },
    Heartbeat {
        token: Token,
    },
    FailureReport {
        token: Token,
        failed_replica: String,
        kind: FailureKind,
        op_seq: u64,
    },
    OffloadConfirm {
        token: Token,
        ok: bool,
        op_seq: u64,
    },
    Close {
        token: Token,
    },
}

impl Request {
    pub fn message_type(&self) -> u8 {
        match self {
            Request::Open { .. } => msg_type::OPEN,
            Request::Publish { .. } => msg_type::PUBLISH,
            Request::Unpublish { .. } => msg_type::UNPUBLISH,
            Request::Replicate { .. } => msg_type::REPLICATE,
            Request::Update { .. } => msg_type::UPDATE,
            Request::Progress { .. } => msg_type::PROGRESS,
            Request::Complete { .. } => msg_type::COMPLETE,
            Request::List { .. } => msg_type::LIST,
            Request::Heartbeat { .. } => msg_type::HEARTBEAT,
            Request::FailureReport { .. } => msg_type::FAILURE_REPORT,
            Request::OffloadConfirm { .. } => msg_type::OFFLOAD_CONFIRM,
            Request::Close { .. } => msg_type::CLOSE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Request::Open { .. } => "open",
            Request::Publish { .. } => "publish",
            Request::Unpublish { .. } => "unpublish",
            Request::Replicate { .. } => "replicate",
            Request::Update { .. } => "update",
            Request::Progress { .. } => "progress",
            Request::Complete { .. } => "complete",
            Request::List { .. } => "list",
            Request::Heartbeat { .. } => "heartbeat",
            Request::FailureReport { .. } => "failure-report",
            Request::OffloadConfirm { .. } => "offload-confirm",
            Request::Close { .. } => "close",
        }
    }

    pub fn token(&self) -> Option<Token> {
        match self {
            Request::Open { .. } | Request::List { .. } => None,
            Request::Publish { token, .. }
            | Request::Unpublish { token, .. }
            | Request::Replicate { token, .. }
            | Request::Update { token, .. }
            | Request::Progress { token, .. }
            | Request::Complete { token, .. }
            | Request::Heartbeat { token }
            | Request::FailureReport { token, .. }
            | Request::OffloadConfirm { token, .. }
            | Request::Close { token } => Some(*token),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    /// Carries the server's compaction settings so every replica lays out
    /// its manifest identically.
    Opened { token: Token, compaction: CompactionConfig },
    Ack,
    Assignment(SourceAssignment),
    Decision(UpdateDecision),
    Directive(Directive),
    Listing(Listing),
    Error(ServerError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Request { req_id: u64, request: Request },
    Reply { req_id: u64, reply: Reply },
    /// Server-initiated directive for one handle.
    Push { token: Token, directive: Directive },
}

pub mod msg_type {
    pub const OPEN: u8 = 0x01;
    pub const PUBLISH: u8 = 0x02;
    pub const UNPUBLISH: u8 = 0x03;
    pub const REPLICATE: u8 = 0x04;
    pub const UPDATE: u8 = 0x05;
    pub const PROGRESS: u8 = 0x06;
    pub const COMPLETE: u8 = 0x07;
    pub const LIST: u8 = 0x08;
    pub const HEARTBEAT: u8 = 0x09;
    pub const FAILURE_REPORT: u8 = 0x0A;
    pub const OFFLOAD_CONFIRM: u8 = 0x0B;
    pub const CLOSE: u8 = 0x0C;
    pub const REPLY: u8 = 0x80;
    pub const DIRECTIVE: u8 = 0x81;
}

fn encode_spec(enc: &mut Encoder, tag: u8, spec: VersionSpec) {
    enc.nested(tag, |e| match spec {
        VersionSpec::Absolute(v) => {
            e.u64(1, v.0);
        }
        VersionSpec::Relative(k) => {
            e.u64(2, k as u64);
        }
    });
}

fn decode_spec(field: &Field<'_>) -> Result<VersionSpec> {
    let fields = field.decoder().fields()?;
    match fields.as_slice() {
        [f] if f.tag == 1 => Ok(VersionSpec::Absolute(VersionId(f.u64()?))),
        [f] if f.tag == 2 => Ok(VersionSpec::Relative(f.u32()?)),
        _ => Err(Error::decode("malformed version spec")),
    }
}

impl Wire for ShardCoord {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(1, &self.model)
            .str(2, &self.replica)
            .u64(3, self.num_shards as u64)
            .u64(4, self.shard_idx as u64);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let (mut model, mut replica, mut n, mut idx) = (None, None, None, None);
        while let Some(f) = dec.next_field()? {
            match f.tag {
                1 => model = Some(f.string()?),
                2 => replica = Some(f.string()?),
                3 => n = Some(f.u32()?),
                4 => idx = Some(f.u32()?),
                _ => {}
            }
        }
        Ok(ShardCoord {
            model: require(model, "coord.model")?,
            replica: require(replica, "coord.replica")?,
            num_shards: require(n, "coord.num_shards")?,
            shard_idx: require(idx, "coord.shard_idx")?,
        })
    }
}

impl Wire for LocationInfo {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(1, &self.datacenter).bool(2, self.spot).str(3, &self.endpoint);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let (mut dc, mut spot, mut endpoint) = (None, None, None);
        while let Some(f) = dec.next_field()? {
            match f.tag {
                1 => dc = Some(f.string()?),
                2 => spot = Some(f.bool()?),
                3 => endpoint = Some(f.string()?),
                _ => {}
            }
        }
        Ok(LocationInfo {
            datacenter: require(dc, "location.datacenter")?,
            spot: require(spot, "location.spot")?,
            endpoint: require(endpoint, "location.endpoint")?,
        })
    }
}

impl Wire for SourceAssignment {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(1, self.version.0)
            .u64(2, self.shard_idx as u64)
            .str(3, &self.source_replica)
            .str(4, &self.source_endpoint)
            .bool(5, self.source_complete)
            .bool(6, self.cross_dc)
            .record(7, &self.manifest)
            .u64(8, self.op_seq)
            .u64(9, self.token.0);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let (mut version, mut shard, mut replica, mut endpoint) = (None, None, None, None);
        let (mut complete, mut cross, mut manifest, mut op_seq, mut token) = (None, None, None, None, None);
        while let Some(f) = dec.next_field()? {
            match f.tag {
                1 => version = Some(VersionId(f.u64()?)),
                2 => shard = Some(f.u32()?),
                3 => replica = Some(f.string()?),
                4 => endpoint = Some(f.string()?),
                5 => complete = Some(f.bool()?),
                6 => cross = Some(f.bool()?),
                7 => manifest = Some(f.record::<TensorManifest>()?),
                8 => op_seq = Some(f.u64()?),
                9 => token = Some(Token(f.u64()?)),
                _ => {}
            }
        }
        Ok(SourceAssignment {
            version: require(version, "assignment.version")?,
            shard_idx: require(shard, "assignment.shard_idx")?,
            source_replica: require(replica, "assignment.source_replica")?,
            source_endpoint: require(endpoint, "assignment.source_endpoint")?,
            source_complete: require(complete, "assignment.source_complete")?,
            cross_dc: require(cross, "assignment.cross_dc")?,
            manifest: require(manifest, "assignment.manifest")?,
            op_seq: require(op_seq, "assignment.op_seq")?,
            token: require(token, "assignment.token")?,
        })
    }
}

impl Wire for Directive {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Directive::OffloadFirst { version } => {
                enc.u64(1, 1).u64(2, version.0);
            }
            Directive::OffloadRelease {
                replica,
                shard_idx,
                version,
            } => {
                enc.u64(1, 2).u64(2, version.0).str(3, replica).u64(4, *shard_idx as u64);
            }
            Directive::Reassign(a) => {
                enc.u64(1, 3).record(5, a);
            }
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let (mut kind, mut version, mut replica, mut shard, mut assignment) = (None, None, None, None, None);
        while let Some(f) = dec.next_field()? {
            match f.tag {
                1 => kind = Some(f.u64()?),
                2 => version = Some(VersionId(f.u64()?)),
                3 => replica = Some(f.string()?),
                4 => shard = Some(f.u32()?),
                5 => assignment = Some(f.record::<SourceAssignment>()?),
                _ => {}
            }
        }
        match require(kind, "directive.kind")? {
            1 => Ok(Directive::OffloadFirst {
                version: require(version, "directive.version")?,
            }),
            2 => Ok(Directive::OffloadRelease {
                replica: require(replica, "directive.replica")?,
                shard_idx: require(shard, "directive.shard_idx")?,
                version: require(version, "directive.version")?,
            }),
            3 => Ok(Directive::Reassign(require(assignment, "directive.assignment")?)),
            k => Err(Error::decode(format!("unknown directive kind {k}"))),
        }
    }
}

fn encode_request(req_id: u64, req: &Request) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u64(1, req_id);
    match req {
        Request::Open { coord, location, retain } => {
            e.record(3, coord).record(4, location);
            for &k in &retain.lags {
                e.u64(5, k as u64);
            }
        }
        Request::Publish {
            token,
            version,
            manifest,
            op_seq,
        } => {
            e.u64(2, token.0).u64(3, version.0).record(4, manifest).u64(15, *op_seq);
        }
        Request::Unpublish { token, op_seq } => {
            e.u64(2, token.0).u64(15, *op_seq);
        }
        Request::Replicate { token, spec, op_seq } => {
            e.u64(2, token.0);
            encode_spec(&mut e, 3, *spec);
            e.u64(15, *op_seq);
        }
        Request::Update {
            token,
            spec,
            current,
            op_seq,
            offload_seeding,
        } => {
            e.u64(2, token.0);
            encode_spec(&mut e, 3, *spec);
            e.opt_u64(4, current.map(|v| v.0)).bool(5, *offload_seeding).u64(15, *op_seq);
        }
        Request::Progress { token, progress } => {
            e.u64(2, token.0).u64(3, *progress);
        }
        Request::Complete { token, op_seq } => {
            e.u64(2, token.0).u64(15, *op_seq);
        }
        Request::List { model } => {
            e.str(3, model);
        }
        Request::Heartbeat { token } | Request::Close { token } => {
            e.u64(2, token.0);
        }
        Request::FailureReport {
            token,
            failed_replica,
            kind,
            op_seq,
        } => {
            e.u64(2, token.0).str(3, failed_replica).u64(4, *kind as u64).u64(15, *op_seq);
        }
        Request::OffloadConfirm { token, ok, op_seq } => {
            e.u64(2, token.0).bool(3, *ok).u64(15, *op_seq);
        }
    }
    e.finish()
}

#[derive(Default)]
struct RawFields<'a> {
    by_tag: BTreeMap<u8, Vec<Field<'a>>>,
}

impl<'a> RawFields<'a> {
    fn parse(body: &'a [u8]) -> Result<Self> {
        let mut out = RawFields::default();
        for f in Decoder::new(body).fields()? {
            out.by_tag.entry(f.tag).or_default().push(f);
        }
        Ok(out)
    }

    fn one(&self, tag: u8, what: &str) -> Result<Field<'a>> {
        match self.by_tag.get(&tag).map(Vec::as_slice) {
            Some([f]) => Ok(*f),
            Some(_) => Err(Error::decode(format!("field {what} repeated"))),
            None => Err(Error::decode(format!("missing field {what}"))),
        }
    }

    fn opt(&self, tag: u8) -> Option<Field<'a>> {
        self.by_tag.get(&tag).and_then(|v| v.first().copied())
    }

    fn all(&self, tag: u8) -> &[Field<'a>] {
        self.by_tag.get(&tag).map(Vec::as_slice).unwrap_or(&[])
    }

    fn token(&self) -> Result<Token> {
        Ok(Token(self.one(2, "token")?.u64()?))
    }

    fn op_seq(&self) -> Result<u64> {
        self.one(15, "op_seq")?.u64()
    }
}

fn decode_request(ty: u8, body: &[u8]) -> Result<(u64, Request)> {
    let f = RawFields::parse(body)?;
    let req_id = f.one(1, "req_id")?.u64()?;
    let req = match ty {
        msg_type::OPEN => Request::Open {
            coord: f.one(3, "coord")?.record()?,
            location: f.one(4, "location")?.record()?,
            retain: RetentionRule::lags(f.all(5).iter().map(|x| x.u32()).collect::<Result<Vec<_>>>()?),
        },
        msg_type::PUBLISH => Request::Publish {
            token: f.token()?,
            version: VersionId(f.one(3, "version")?.u64()?),
            manifest: f.one(4, "manifest")?.record()?,
            op_seq: f.op_seq()?,
        },
        msg_type::UNPUBLISH => Request::Unpublish {
            token: f.token()?,
            op_seq: f.op_seq()?,
        },
        msg_type::REPLICATE => Request::Replicate {
            token: f.token()?,
            spec: decode_spec(&f.one(3, "spec")?)?,
            op_seq: f.op_seq()?,
        },
        msg_type::UPDATE => Request::Update {
            token: f.token()?,
            spec: decode_spec(&f.one(3, "spec")?)?,
            current: f.opt(4).map(|x| x.u64()).transpose()?.map(VersionId),
            offload_seeding: f.one(5, "offload_seeding")?.bool()?,
            op_seq: f.op_seq()?,
        },
        msg_type::PROGRESS => Request::Progress {
            token: f.token()?,
            progress: f.one(3, "progress")?.u64()?,
        },
        msg_type::COMPLETE => Request::Complete {
            token: f.token()?,
            op_seq: f.op_seq()?,
        },
        msg_type::LIST => Request::List {
            model: f.one(3, "model")?.string()?,
        },
        msg_type::HEARTBEAT => Request::Heartbeat { token: f.token()? },
        msg_type::CLOSE => Request::Close { token: f.token()? },
        msg_type::FAILURE_REPORT => Request::FailureReport {
            token: f.token()?,
            failed_replica: f.one(3, "failed_replica")?.string()?,
            kind: FailureKind::from_u64(f.one(4, "kind")?.u64()?)?,
            op_seq: f.op_seq()?,
        },
        msg_type::OFFLOAD_CONFIRM => Request::OffloadConfirm {
            token: f.token()?,
            ok: f.one(3, "ok")?.bool()?,
            op_seq: f.op_seq()?,
        },
        other => return Err(Error::decode(format!("unknown request type {other:#04x}"))),
    };
    Ok((req_id, req))
}

mod reply_kind {
    pub const OPENED: u64 = 1;
    pub const ACK: u64 = 2;
    pub const ASSIGNMENT: u64 = 3;
    pub const DECISION: u64 = 4;
    pub const DIRECTIVE: u64 = 5;
    pub const LISTING: u64 = 6;
    pub const ERROR: u64 = 7;
}

fn encode_reply(req_id: u64, reply: &Reply) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u64(1, req_id);
    match reply {
        Reply::Opened { token, compaction } => {
            e.u64(2, reply_kind::OPENED)
                .u64(3, token.0)
                .u64(4, compaction.threshold)
                .u64(5, compaction.group_capacity);
        }
        Reply::Ack => {
            e.u64(2, reply_kind::ACK);
        }
        Reply::Assignment(a) => {
            e.u64(2, reply_kind::ASSIGNMENT).record(3, a);
        }
        Reply::Decision(d) => {
            e.u64(2, reply_kind::DECISION);
            match d {
                UpdateDecision::NoChange => {
                    e.u64(3, 0);
                }
                UpdateDecision::ChangeTo(a) => {
                    e.u64(3, 1).record(4, a);
                }
                UpdateDecision::Seed(a) => {
                    e.u64(3, 2).record(4, a);
                }
            }
        }
        Reply::Directive(d) => {
            e.u64(2, reply_kind::DIRECTIVE).record(3, d);
        }
        Reply::Listing(listing) => {
            e.u64(2, reply_kind::LISTING);
            for (version, replicas) in listing {
                e.nested(3, |x| {
                    x.u64(1, version.0);
                    for r in replicas {
                        x.str(2, r);
                    }
                });
            }
        }
        Reply::Error(err) => {
            e.u64(2, reply_kind::ERROR).u64(3, err.code as u64).str(4, &err.message);
        }
    }
    e.finish()
}

fn decode_reply(body: &[u8]) -> Result<(u64, Reply)> {
    let f = RawFields::parse(body)?;
    let req_id = f.one(1, "req_id")?.u64()?;
    let reply = match f.one(2, "reply kind")?.u64()? {
        reply_kind::OPENED => Reply::Opened {
            token: Token(f.one(3, "token")?.u64()?),
            compaction: CompactionConfig {
                threshold: f.one(4, "threshold")?.u64()?,
                group_capacity: f.one(5, "group_capacity")?.u64()?,
            },
        },
        reply_kind::ACK => Reply::Ack,
        reply_kind::ASSIGNMENT => Reply::Assignment(f.one(3, "assignment")?.record()?),
        reply_kind::DECISION => match f.one(3, "decision")?.u64()? {
            0 => Reply::Decision(UpdateDecision::NoChange),
            1 => Reply::Decision(UpdateDecision::ChangeTo(f.one(4, "assignment")?.record()?)),
            2 => Reply::Decision(UpdateDecision::Seed(f.one(4, "assignment")?.record()?)),
            k => return Err(Error::decode(format!("unknown decision {k}"))),
        },
        reply_kind::DIRECTIVE => Reply::Directive(f.one(3, "directive")?.record()?),
        reply_kind::LISTING => {
            let mut listing = Listing::new();
            for entry in f.all(3) {
                let mut version = None;
                let mut names = BTreeSet::new();
                for x in entry.decoder().fields()? {
                    match x.tag {
                        1 => version = Some(VersionId(x.u64()?)),
                        2 => {
                            names.insert(x.string()?);
                        }
                        _ => {}
                    }
                }
                listing.insert(require(version, "listing.version")?, names);
            }
            Reply::Listing(listing)
        }
        reply_kind::ERROR => Reply::Error(ServerError {
            code: ErrorCode::from_u64(f.one(3, "code")?.u64()?)?,
            message: f.one(4, "message")?.string()?,
        }),
        k => return Err(Error::decode(format!("unknown reply kind {k}"))),
    };
    Ok((req_id, reply))
}

impl Frame {
    pub fn message_type(&self) -> u8 {
        match self {
            Frame::Request { request, .. } => request.message_type(),
            Frame::Reply { .. } => msg_type::REPLY,
            Frame::Push { .. } => msg_type::DIRECTIVE,
        }
    }

    pub fn encode_body(&self) -> Vec<u8> {
        match self {
            Frame::Request { req_id, request } => encode_request(*req_id, request),
            Frame::Reply { req_id, reply } => encode_reply(*req_id, reply),
            Frame::Push { token, directive } => {
                let mut e = Encoder::new();
                e.u64(1, token.0).record(2, directive);
                e.finish()
            }
        }
    }

    pub fn decode(ty: u8, body: &[u8]) -> Result<Frame> {
        match ty {
            msg_type::REPLY => decode_reply(body).map(|(req_id, reply)| Frame::Reply { req_id, reply }),
            msg_type::DIRECTIVE => {
                let f = RawFields::parse(body)?;
                Ok(Frame::Push {
                    token: Token(f.one(1, "token")?.u64()?),
                    directive: f.one(2, "directive")?.record()?,
                })
            }
            _ => decode_request(ty, body).map(|(req_id, request)| Frame::Request { req_id, request }),
        }
    }

    /// The complete on-wire bytes: length prefix, type byte and body.
    pub fn to_wire(&self) -> Vec<u8> {
        let body = self.encode_body();
        let len = u32::try_from(body.len() + 1).expect("frame too large");
        let mut out = Vec::with_capacity(body.len() + 5);
        out.extend_from_slice(&len.to_be_bytes());
        out.push(self.message_type());
        out.extend_from_slice(&body);
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.to_wire())?;
        w.flush()
    }

    pub fn read_from<R: Read>(r: &mut R) -> io::Result<Frame> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let len = u32::from_be_bytes(len) as usize;
        if len == 0 || len > MAX_FRAME {
            return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad frame length {len}")));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        Frame::decode(buf[0], &buf[1..]).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{build_manifest, CompactionConfig};

    fn manifest() -> TensorManifest {
        let tensors = vec![("w".to_string(), vec![1u8; 40]), ("b".to_string(), vec![2u8; 3])];
        build_manifest(&tensors, CompactionConfig::with_threshold(8)).unwrap()
    }

    fn assignment() -> SourceAssignment {
        SourceAssignment {
            version: VersionId(12),
            shard_idx: 1,
            source_replica: "trainer-0".into(),
            source_endpoint: "tcp://127.0.0.1:9000".into(),
            source_complete: false,
            cross_dc: true,
            manifest: manifest(),
            op_seq: 4,
            token: Token(9),
        }
    }

    fn round_trip(frame: Frame) {
        let wire = frame.to_wire();
        let back = Frame::read_from(&mut wire.as_slice()).unwrap();
        assert_eq!(back, frame);
        assert_eq!(back.to_wire(), wire);
    }

    #[test]
    fn every_message_type_round_trips() {
        let token = Token(3);
        let requests = vec![
            Request::Open {
                coord: ShardCoord::new("actor", "rollout-1", 2, 1),
                location: LocationInfo::new("dc1", true, "mem://a"),
                retain: RetentionRule::lags([0, 2]),
            },
            Request::Publish {
                token,
                version: VersionId(7),
                manifest: manifest(),
                op_seq: 1,
            },
            Request::Unpublish { token, op_seq: 2 },
            Request::Replicate {
                token,
                spec: VersionSpec::Relative(1),
                op_seq: 3,
            },
            Request::Update {
                token,
                spec: VersionSpec::absolute(9),
                current: Some(VersionId(8)),
                op_seq: 4,
                offload_seeding: true,
            },
            Request::Update {
                token,
                spec: VersionSpec::LATEST,
                current: None,
                op_seq: 5,
                offload_seeding: false,
            },
            Request::Progress { token, progress: 17 },
            Request::Complete { token, op_seq: 6 },
            Request::List { model: "actor".into() },
            Request::Heartbeat { token },
            Request::FailureReport {
                token,
                failed_replica: "rollout-2".into(),
                kind: FailureKind::Corrupt,
                op_seq: 7,
            },
            Request::OffloadConfirm { token, ok: true, op_seq: 8 },
            Request::Close { token },
        ];
        for (i, request) in requests.into_iter().enumerate() {
            round_trip(Frame::Request { req_id: i as u64, request });
        }

        let mut listing = Listing::new();
        listing.insert(VersionId(2), ["rollout-1".to_string()].into());
        listing.insert(VersionId(3), ["rollout-2".to_string(), "trainer-0".to_string()].into());
        let replies = vec![
            Reply::Opened {
                token,
                compaction: CompactionConfig::default(),
            },
            Reply::Ack,
            Reply::Assignment(assignment()),
            Reply::Decision(UpdateDecision::NoChange),
            Reply::Decision(UpdateDecision::ChangeTo(assignment())),
            Reply::Decision(UpdateDecision::Seed(assignment())),
            Reply::Directive(Directive::OffloadFirst { version: VersionId(3) }),
            Reply::Listing(listing),
            Reply::Error(ServerError::new(ErrorCode::ManifestConflict, "shard 0")),
        ];
        for (i, reply) in replies.into_iter().enumerate() {
            round_trip(Frame::Reply { req_id: i as u64, reply });
        }
        round_trip(Frame::Push {
            token,
            directive: Directive::OffloadRelease {
                replica: "trainer-0+offload".into(),
                shard_idx: 0,
                version: VersionId(3),
            },
        });
        round_trip(Frame::Push {
            token,
            directive: Directive::Reassign(assignment()),
        });
    }

    #[test]
    fn heartbeat_frame_bytes() {
        let wire = Frame::Request {
            req_id: 1,
            request: Request::Heartbeat { token: Token(2) },
        }
        .to_wire();
        let expected: Vec<u8> = vec![
            0, 0, 0, 27, // length: type byte + 26 body bytes
            0x09, // HEARTBEAT
            1, 0, 0, 0, 8, 0, 0, 0, 0, 0, 0, 0, 1, // req_id
            2, 0, 0, 0, 8, 0, 0, 0, 0, 0, 0, 0, 2, // token
        ];
        assert_eq!(wire, expected);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Frame::read_from(&mut [0u8, 0, 0, 0].as_slice()).is_err());
        assert!(Frame::decode(0x7F, &[]).is_err());
        let mut wire = Frame::Request {
            req_id: 1,
            request: Request::Heartbeat { token: Token(2) },
        }
        .to_wire();
        wire.truncate(10);
        assert!(Frame::read_from(&mut wire.as_slice()).is_err());
    }
}
