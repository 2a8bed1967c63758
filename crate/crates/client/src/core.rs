//! Protocol state of one shard handle, free of I/O.
//!
//! [`HandleCore`] builds the requests a handle sends and interprets the
//! replies. The blocking [`crate::ShardHandle`] and the simulator both drive
//! it, so every state transition lives here exactly once.

use std::fmt;

use ros_core::{
    CompactionConfig, Directive, FailureKind, LocationInfo, Reply, Request, RetentionRule, ServerError, ShardCoord,
    SourceAssignment, TensorManifest, Token, UpdateDecision, VersionId, VersionSpec,
};

use crate::ClientError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleState {
    Opened,
    Registered,
    Published(VersionId),
    Replicating,
    /// Unpublished but still holding the bytes of a version.
    Idle(VersionId),
    Closed,
}

impl fmt::Display for HandleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HandleState::Opened => f.write_str("opened"),
            HandleState::Registered => f.write_str("registered"),
            HandleState::Published(v) => write!(f, "published({v})"),
            HandleState::Replicating => f.write_str("replicating"),
            HandleState::Idle(v) => write!(f, "idle({v})"),
            HandleState::Closed => f.write_str("closed"),
        }
    }
}

/// What a replicate or update reply asks the handle to do next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    /// Fill the registered regions from the assigned source.
    Fill(SourceAssignment),
    /// Nothing to do; the held version stays.
    NoChange,
    /// Fill a seeding buffer in the background and keep the held version.
    Seed(SourceAssignment),
}

#[derive(Debug, Clone)]
pub struct HandleCore {
    coord: ShardCoord,
    location: LocationInfo,
    retain: RetentionRule,
    token: Option<Token>,
    state: HandleState,
    /// State to return to if a replicate is refused.
    before_fill: HandleState,
    op_seq: u64,
    current: Option<VersionId>,
    registered: bool,
    compaction: CompactionConfig,
}

fn invalid(msg: impl Into<String>) -> ClientError {
    ClientError::InvalidState(msg.into())
}

fn server_error(reply: Reply, what: &str) -> ClientError {
    match reply {
        Reply::Error(e) => ClientError::Server(e),
        other => ClientError::Server(ServerError::new(
            ros_core::ErrorCode::ProtocolViolation,
            format!("unexpected reply to {what}: {other:?}"),
        )),
    }
}

impl HandleCore {
    pub fn new(coord: ShardCoord, location: LocationInfo, retain: RetentionRule) -> Self {
        HandleCore {
            coord,
            location,
            retain,
            token: None,
            state: HandleState::Opened,
            before_fill: HandleState::Opened,
            op_seq: 0,
            current: None,
            registered: false,
            compaction: CompactionConfig::default(),
        }
    }

    pub fn coord(&self) -> &ShardCoord {
        &self.coord
    }

    pub fn location(&self) -> &LocationInfo {
        &self.location
    }

    pub fn state(&self) -> HandleState {
        self.state
    }

    pub fn token(&self) -> Option<Token> {
        self.token
    }

    pub fn op_seq(&self) -> u64 {
        self.op_seq
    }

    /// Version whose bytes the registered regions hold, if intact.
    pub fn current(&self) -> Option<VersionId> {
        self.current
    }

    pub fn compaction(&self) -> CompactionConfig {
        self.compaction
    }

    pub fn is_registered(&self) -> bool {
        self.registered
    }

    fn token_or_err(&self) -> Result<Token, ClientError> {
        match self.state {
            HandleState::Closed => Err(invalid("handle is closed")),
            _ => self.token.ok_or_else(|| ClientError::Unavailable("handle is not connected".into())),
        }
    }

    pub fn open_request(&self) -> Request {
        Request::Open {
            coord: self.coord.clone(),
            location: self.location.clone(),
            retain: self.retain.clone(),
        }
    }

    /// Applies the reply to an open. After a failover the handle comes back
    /// unpublished but keeps its registration and held version.
    pub fn opened(&mut self, reply: Reply) -> Result<(), ClientError> {
        match reply {
            Reply::Opened { token, compaction } => {
                self.token = Some(token);
                self.compaction = compaction;
                self.state = match (self.registered, self.current) {
                    (false, _) => HandleState::Opened,
                    (true, Some(v)) => HandleState::Idle(v),
                    (true, None) => HandleState::Registered,
                };
                Ok(())
            }
            other => Err(server_error(other, "open")),
        }
    }

    pub fn register(&mut self) -> Result<(), ClientError> {
        match self.state {
            HandleState::Opened => {
                self.registered = true;
                self.state = HandleState::Registered;
                Ok(())
            }
            HandleState::Closed => Err(invalid("handle is closed")),
            s => Err(invalid(format!("cannot register while {s}"))),
        }
    }

    pub fn unregister(&mut self) -> Result<(), ClientError> {
        self.ensure_mutable()?;
        match self.state {
            HandleState::Closed | HandleState::Opened => Err(invalid(format!("cannot unregister while {}", self.state))),
            _ => {
                self.registered = false;
                self.current = None;
                self.state = HandleState::Opened;
                Ok(())
            }
        }
    }

    /// Errors unless the host may change registered bytes right now.
    pub fn ensure_mutable(&self) -> Result<(), ClientError> {
        match self.state {
            HandleState::Published(v) => Err(ClientError::MutabilityViolation(format!(
                "version {v} is published; unpublish first"
            ))),
            HandleState::Replicating => Err(ClientError::MutabilityViolation("a replication is in progress".into())),
            _ => Ok(()),
        }
    }

    pub fn publish(&mut self, version: VersionId, manifest: TensorManifest) -> Result<Request, ClientError> {
        let token = self.token_or_err()?;
        match self.state {
            HandleState::Registered | HandleState::Idle(_) => {}
            s => return Err(invalid(format!("cannot publish while {s}"))),
        }
        self.op_seq += 1;
        Ok(Request::Publish {
            token,
            version,
            manifest,
            op_seq: self.op_seq,
        })
    }

    pub fn published(&mut self, version: VersionId, reply: Reply) -> Result<(), ClientError> {
        match reply {
            Reply::Ack => {
                self.state = HandleState::Published(version);
                self.current = Some(version);
                Ok(())
            }
            other => Err(server_error(other, "publish")),
        }
    }

    pub fn unpublish(&mut self) -> Result<Request, ClientError> {
        let token = self.token_or_err()?;
        match self.state {
            HandleState::Published(_) => {}
            s => return Err(invalid(format!("cannot unpublish while {s}"))),
        }
        self.op_seq += 1;
        Ok(Request::Unpublish {
            token,
            op_seq: self.op_seq,
        })
    }

    /// Returns the version to offload when the server asks for a copy first.
    pub fn unpublished(&mut self, reply: Reply) -> Result<Option<VersionId>, ClientError> {
        match reply {
            Reply::Ack => {
                self.go_idle();
                Ok(None)
            }
            Reply::Directive(Directive::OffloadFirst { version }) => Ok(Some(version)),
            other => Err(server_error(other, "unpublish")),
        }
    }

    fn go_idle(&mut self) {
        self.state = match self.current {
            Some(v) => HandleState::Idle(v),
            None => HandleState::Registered,
        };
    }

    pub fn offload_confirm(&self, ok: bool) -> Result<Request, ClientError> {
        Ok(Request::OffloadConfirm {
            token: self.token_or_err()?,
            ok,
            op_seq: self.op_seq,
        })
    }

    /// Applies the final answer of an operation that offloaded first. It
    /// carries the operation's own reply (an ack for unpublish, a decision
    /// for update).
    pub fn offload_confirmed(&mut self, reply: Reply) -> Result<Option<Resolution>, ClientError> {
        match reply {
            Reply::Ack => {
                self.go_idle();
                Ok(None)
            }
            Reply::Decision(_) | Reply::Assignment(_) => {
                self.before_fill = match self.current {
                    Some(v) => HandleState::Idle(v),
                    None => HandleState::Registered,
                };
                self.state = self.before_fill;
                self.resolved(reply).map(Some)
            }
            other => Err(server_error(other, "offload confirmation")),
        }
    }

    pub fn replicate(&mut self, spec: VersionSpec) -> Result<Request, ClientError> {
        let token = self.token_or_err()?;
        match self.state {
            HandleState::Registered | HandleState::Idle(_) => {}
            s => return Err(invalid(format!("cannot replicate while {s}"))),
        }
        self.op_seq += 1;
        self.before_fill = self.state;
        Ok(Request::Replicate {
            token,
            spec,
            op_seq: self.op_seq,
        })
    }

    pub fn update(&mut self, spec: VersionSpec, offload_seeding: bool) -> Result<Request, ClientError> {
        let token = self.token_or_err()?;
        match self.state {
            HandleState::Registered | HandleState::Idle(_) | HandleState::Published(_) => {}
            s => return Err(invalid(format!("cannot update while {s}"))),
        }
        self.op_seq += 1;
        self.before_fill = self.state;
        Ok(Request::Update {
            token,
            spec,
            current: self.current,
            op_seq: self.op_seq,
            offload_seeding,
        })
    }

    /// Interprets the reply to a replicate or update. A reply asking for an
    /// offload first comes back as an error-free `Ok(Err(version))`.
    pub fn resolved_or_offload(&mut self, reply: Reply) -> Result<Result<Resolution, VersionId>, ClientError> {
        if let Reply::Directive(Directive::OffloadFirst { version }) = reply {
            return Ok(Err(version));
        }
        self.resolved(reply).map(Ok)
    }

    pub fn resolved(&mut self, reply: Reply) -> Result<Resolution, ClientError> {
        match reply {
            Reply::Assignment(a) | Reply::Decision(UpdateDecision::ChangeTo(a)) => {
                self.state = HandleState::Replicating;
                self.current = None;
                Ok(Resolution::Fill(a))
            }
            Reply::Decision(UpdateDecision::NoChange) => {
                self.state = self.before_fill;
                Ok(Resolution::NoChange)
            }
            Reply::Decision(UpdateDecision::Seed(a)) => {
                self.state = self.before_fill;
                Ok(Resolution::Seed(a))
            }
            other => {
                self.state = self.before_fill;
                Err(server_error(other, "replicate"))
            }
        }
    }

    pub fn progress(&self, a: &SourceAssignment, entries: usize) -> Request {
        Request::Progress {
            token: a.token,
            progress: entries as u64,
        }
    }

    pub fn complete(&self, a: &SourceAssignment) -> Request {
        Request::Complete {
            token: a.token,
            op_seq: a.op_seq,
        }
    }

    pub fn report(&self, a: &SourceAssignment, kind: FailureKind) -> Request {
        Request::FailureReport {
            token: a.token,
            failed_replica: a.source_replica.clone(),
            kind,
            op_seq: a.op_seq,
        }
    }

    /// Applies the reply to completing a fill of the registered regions.
    pub fn filled(&mut self, a: &SourceAssignment, reply: Reply) -> Result<(), ClientError> {
        match reply {
            Reply::Ack => {
                self.state = HandleState::Published(a.version);
                self.current = Some(a.version);
                Ok(())
            }
            other => {
                self.fill_aborted();
                Err(server_error(other, "complete"))
            }
        }
    }

    /// The regions hold a torn mix of bytes after an abandoned fill.
    pub fn fill_aborted(&mut self) {
        self.current = None;
        self.state = HandleState::Registered;
    }

    /// Forgets the server session. Bytes and the held version survive
    /// unless a fill was cut short.
    pub fn reset_session(&mut self) {
        self.token = None;
        if self.state == HandleState::Replicating {
            self.current = None;
        }
        if self.state != HandleState::Closed {
            self.state = match (self.registered, self.current) {
                (false, _) => HandleState::Opened,
                (true, Some(v)) => HandleState::Idle(v),
                (true, None) => HandleState::Registered,
            };
        }
    }

    pub fn heartbeat(&self) -> Option<Request> {
        self.token.map(|token| Request::Heartbeat { token })
    }

    pub fn list(&self) -> Request {
        Request::List {
            model: self.coord.model.clone(),
        }
    }

    /// Request that ends the session, if there is one.
    pub fn close(&mut self) -> Option<Request> {
        if self.state == HandleState::Closed {
            return None;
        }
        self.state = HandleState::Closed;
        self.registered = false;
        self.token.take().map(|token| Request::Close { token })
    }
}
