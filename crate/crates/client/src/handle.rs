//! Blocking shard handle over a TCP control connection.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::Receiver;
use std::sync::{Arc, Mutex, MutexGuard, Weak};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use ros_core::{
    build_manifest, Directive, FailureKind, Listing, Reply, RetentionRule, ServerError, ShardCoord, SourceAssignment,
    Token, VersionId, VersionSpec,
};
use ros_transfer::{PullStatus, Regions, Role, ShardStore, Slot, TransferError};

use crate::conn::Connection;
use crate::core::{HandleCore, HandleState, Resolution};
use crate::fill::FillJob;
use crate::{ClientConfig, ClientError, DataPlane};

const OPEN_TIMEOUT: Duration = Duration::from_secs(5);
/// Back-off while a pipelined source is behind.
const BEHIND_POLL: Duration = Duration::from_millis(2);

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

struct Session {
    conn: Option<Arc<Connection>>,
    server: usize,
}

struct Shared {
    cfg: ClientConfig,
    plane: DataPlane,
    key: String,
    store: Arc<ShardStore>,
    core: Mutex<HandleCore>,
    session: Mutex<Session>,
    /// Reassignments pushed by the server, by the token of the fill.
    reassigned: Mutex<HashMap<Token, SourceAssignment>>,
    stop: AtomicBool,
    offload_fails: AtomicBool,
    published_fingerprint: Mutex<Option<u64>>,
    seed: Mutex<Option<JoinHandle<()>>>,
}

/// One shard of one replica, as seen by the worker that owns it.
///
/// Calls are blocking and the API is single-caller. Group operations
/// (publish, unpublish, replicate, update) complete only once every shard
/// of the group has issued them, so the shards of one group must be driven
/// concurrently; see [`on_each`].
pub struct ShardHandle {
    shared: Arc<Shared>,
    heartbeat: Option<JoinHandle<()>>,
}

impl ShardHandle {
    pub fn open(
        cfg: &ClientConfig,
        plane: &DataPlane,
        coord: ShardCoord,
        retain: RetentionRule,
    ) -> Result<ShardHandle, ClientError> {
        if coord.shard_idx >= coord.num_shards {
            return Err(ClientError::InvalidArgument(format!(
                "shard {} of a {}-way group",
                coord.shard_idx, coord.num_shards
            )));
        }
        if cfg.servers.is_empty() {
            return Err(ClientError::Unavailable("no reference server configured".into()));
        }
        let key = format!("{}/{}/{}", coord.model, coord.replica, coord.shard_idx);
        let endpoint = plane.endpoint(&key).to_string();
        let location = ros_core::LocationInfo::new(cfg.datacenter.clone(), cfg.spot, endpoint);
        let store = Arc::new(ShardStore::new(coord.shard_idx));
        let shared = Arc::new(Shared {
            cfg: cfg.clone(),
            plane: plane.clone(),
            key: key.clone(),
            store: store.clone(),
            core: Mutex::new(HandleCore::new(coord, location, retain)),
            session: Mutex::new(Session { conn: None, server: 0 }),
            reassigned: Mutex::default(),
            stop: AtomicBool::new(false),
            offload_fails: AtomicBool::new(false),
            published_fingerprint: Mutex::new(None),
            seed: Mutex::new(None),
        });
        {
            let mut s = lock(&shared.session);
            let (conn, idx) = shared.connect(0)?;
            s.conn = Some(conn);
            s.server = idx;
        }
        plane.service().attach(key, store);
        let weak = Arc::downgrade(&shared);
        let interval = cfg.heartbeat_interval;
        let heartbeat = thread::Builder::new()
            .name("ros-heartbeat".into())
            .spawn(move || heartbeat_loop(weak, interval))
            .map_err(|e| ClientError::Unavailable(e.to_string()))?;
        tracing::info!(target: "ros::client", handle = %shared.key, "opened");
        Ok(ShardHandle {
            shared,
            heartbeat: Some(heartbeat),
        })
    }

    fn core(&self) -> MutexGuard<'_, HandleCore> {
        lock(&self.shared.core)
    }

    pub fn coord(&self) -> ShardCoord {
        self.core().coord().clone()
    }

    pub fn state(&self) -> HandleState {
        self.core().state()
    }

    /// Version whose bytes the registered regions hold.
    pub fn current_version(&self) -> Option<VersionId> {
        self.core().current()
    }

    pub fn token(&self) -> Option<Token> {
        self.core().token()
    }

    /// Address of the reference server currently in use.
    pub fn server(&self) -> Option<String> {
        lock(&self.shared.session).conn.as_ref().map(|c| c.addr().to_string())
    }

    pub fn endpoint(&self) -> String {
        self.shared.plane.endpoint(&self.shared.key).to_string()
    }

    pub fn store(&self) -> &Arc<ShardStore> {
        &self.shared.store
    }

    /// Makes the next retention offload fail as if host memory ran out.
    pub fn set_offload_fails(&self, fail: bool) {
        self.shared.offload_fails.store(fail, Ordering::SeqCst);
    }

    pub fn register(&mut self, tensors: Vec<(String, Vec<u8>)>) -> Result<(), ClientError> {
        if tensors.is_empty() {
            return Err(ClientError::InvalidArgument("no tensors to register".into()));
        }
        let compaction = self.core().compaction();
        let manifest = build_manifest(&tensors, compaction).map_err(|e| ClientError::InvalidArgument(e.to_string()))?;
        let mut by_name: HashMap<String, Vec<u8>> = tensors.into_iter().collect();
        let ordered = manifest
            .entries()
            .iter()
            .map(|e| by_name.remove(&e.name).unwrap_or_default())
            .collect();
        let regions = Regions::new(manifest, ordered)?;
        self.core().register()?;
        self.shared.store.install(Role::Main, Slot::new(regions));
        self.shared.transition("registered");
        Ok(())
    }

    pub fn unregister(&mut self) -> Result<(), ClientError> {
        self.core().unregister()?;
        self.shared.store.remove(Role::Main);
        self.shared.transition("unregistered");
        Ok(())
    }

    /// Runs `f` on the bytes of one registered tensor.
    pub fn tensor<R>(&self, name: &str, f: impl FnOnce(&[u8]) -> R) -> Result<R, ClientError> {
        self.shared
            .store
            .with(Role::Main, |s| s.regions.tensor(name).map(f))
            .flatten()
            .ok_or_else(|| ClientError::InvalidArgument(format!("no registered tensor {name:?}")))
    }

    /// Runs `f` on the writable bytes of one registered tensor. Refused while
    /// the bytes are published or being replicated.
    pub fn tensor_mut<R>(&mut self, name: &str, f: impl FnOnce(&mut [u8]) -> R) -> Result<R, ClientError> {
        self.core().ensure_mutable()?;
        self.shared
            .store
            .with_mut(Role::Main, |s| s.regions.tensor_mut(name).map(f))
            .flatten()
            .ok_or_else(|| ClientError::InvalidArgument(format!("no registered tensor {name:?}")))
    }

    /// Copies of the registered tensors, in manifest order.
    pub fn tensors(&self) -> Vec<(String, Vec<u8>)> {
        self.shared
            .store
            .with(Role::Main, |s| {
                s.regions
                    .manifest()
                    .entries()
                    .iter()
                    .zip(s.regions.tensors())
                    .map(|(e, t)| (e.name.clone(), t.clone()))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Digest over every registered tensor.
    pub fn fingerprint(&self) -> Option<u64> {
        self.shared.store.with(Role::Main, |s| s.regions.fingerprint())
    }

    pub fn publish(&mut self, version: VersionId) -> Result<(), ClientError> {
        let state = self.state();
        if !matches!(state, HandleState::Registered | HandleState::Idle(_)) {
            return Err(ClientError::InvalidState(format!("cannot publish while {state}")));
        }
        // Bytes may have changed since the last publish: repack and
        // recompute checksums before anyone can read them.
        let (manifest, fingerprint) = self
            .shared
            .store
            .with_mut(Role::Main, |s| {
                s.regions.repack();
                s.version = Some(version);
                s.progress = s.regions.manifest().len();
                s.serving = true;
                (s.regions.manifest().clone(), s.regions.fingerprint())
            })
            .ok_or_else(|| ClientError::InvalidState("nothing registered".into()))?;
        let req = self.core().publish(version, manifest);
        let result = req
            .and_then(|req| self.shared.call(req))
            .and_then(|reply| self.core().published(version, reply));
        match result {
            Ok(()) => {
                *lock(&self.shared.published_fingerprint) = Some(fingerprint);
                self.shared.transition(&format!("published v={version}"));
                Ok(())
            }
            Err(e) => {
                self.shared.store.with_mut(Role::Main, |s| s.serving = false);
                Err(e)
            }
        }
    }

    /// Withdraws the published version. Returns once in-flight reads from
    /// this replica have drained and any requested offload is in place.
    pub fn unpublish(&mut self) -> Result<(), ClientError> {
        let req = self.core().unpublish()?;
        let reply = self.shared.call(req)?;
        let offload = self.core().unpublished(reply)?;
        if let Some(v) = offload {
            self.confirm_offload(v)?;
        }
        self.shared.store.with_mut(Role::Main, |s| s.serving = false);
        self.shared.transition("unpublished");
        if self.shared.cfg.check_contract {
            let before = lock(&self.shared.published_fingerprint).take();
            if before.is_some() && before != self.fingerprint() {
                return Err(ClientError::MutabilityViolation(
                    "published bytes changed before unpublish".into(),
                ));
            }
        }
        Ok(())
    }

    /// Copies the registered regions to host memory and tells the server.
    fn confirm_offload(&mut self, version: VersionId) -> Result<Option<Resolution>, ClientError> {
        let ok = !self.shared.offload_fails.swap(false, Ordering::SeqCst)
            && self
                .shared
                .store
                .with(Role::Main, |s| s.regions.clone())
                .map(|regions| {
                    let progress = regions.manifest().len();
                    self.shared.store.install(
                        Role::Offload,
                        Slot {
                            version: Some(version),
                            regions,
                            progress,
                            serving: true,
                        },
                    );
                })
                .is_some();
        let req = self.core().offload_confirm(ok)?;
        let reply = self.shared.call(req)?;
        if !ok {
            tracing::warn!(target: "ros::client", handle = %self.shared.key, "offload failed");
            return Err(ClientError::OffloadFailed);
        }
        self.shared.transition(&format!("offloaded v={version}"));
        self.core().offload_confirmed(reply)
    }

    /// Blocks until `spec` is materialized in the registered regions and
    /// this replica publishes it.
    pub fn replicate(&mut self, spec: VersionSpec) -> Result<VersionId, ClientError> {
        let req = self.core().replicate(spec)?;
        let reply = self.shared.call(req)?;
        let resolution = self.core().resolved(reply)?;
        match resolution {
            Resolution::Fill(a) => {
                let v = a.version;
                self.fill_main(a)?;
                Ok(v)
            }
            other => Err(ClientError::InvalidState(format!("unexpected answer to replicate: {other:?}"))),
        }
    }

    /// Moves to `spec` if it differs from the held version. Returns whether
    /// the registered regions changed.
    pub fn update(&mut self, spec: VersionSpec) -> Result<bool, ClientError> {
        let req = self.core().update(spec, self.shared.cfg.offload_seeding)?;
        let reply = self.shared.call(req)?;
        let first = self.core().resolved_or_offload(reply)?;
        let resolution = match first {
            Ok(r) => r,
            Err(v) => match self.confirm_offload(v)? {
                Some(r) => r,
                None => return Ok(false),
            },
        };
        match resolution {
            Resolution::Fill(a) => {
                self.fill_main(a)?;
                Ok(true)
            }
            Resolution::NoChange => Ok(false),
            Resolution::Seed(a) => {
                self.shared.start_seed(a)?;
                Ok(false)
            }
        }
    }

    fn fill_main(&mut self, a: SourceAssignment) -> Result<(), ClientError> {
        let prepared = self.shared.store.with_mut(Role::Main, |s| {
            s.regions.set_manifest(a.manifest.clone())?;
            s.version = Some(a.version);
            s.progress = 0;
            s.serving = true;
            Ok::<_, TransferError>(())
        });
        let result = match prepared {
            None => Err(ClientError::InvalidState("nothing registered".into())),
            Some(Err(e)) => Err(ClientError::InvalidArgument(format!("registered layout does not match: {e}"))),
            Some(Ok(())) => self.shared.run_fill(Role::Main, FillJob::new(a.clone())),
        };
        let result = result.and_then(|job| {
            let req = self.core().complete(job.assignment());
            let reply = self.shared.call(req)?;
            self.core().filled(job.assignment(), reply)
        });
        match result {
            Ok(()) => {
                self.shared.transition(&format!("replicated v={}", a.version));
                Ok(())
            }
            Err(e) => {
                self.core().fill_aborted();
                self.shared.store.with_mut(Role::Main, |s| {
                    s.serving = false;
                    s.version = None;
                    s.progress = 0;
                });
                self.shared.transition(&format!("fill of v={} aborted: {e}", a.version));
                Err(e)
            }
        }
    }

    pub fn list(&self) -> Result<Listing, ClientError> {
        let req = self.core().list();
        match self.shared.call(req)? {
            Reply::Listing(l) => Ok(l),
            Reply::Error(e) => Err(e.into()),
            other => Err(unexpected(other)),
        }
    }

    /// Polls `list` until `pred` holds, for at most `timeout`.
    pub fn wait(&self, pred: impl Fn(&Listing) -> bool, timeout: Option<Duration>) -> Result<Listing, ClientError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            match self.list() {
                Ok(l) if pred(&l) => return Ok(l),
                Ok(_) | Err(ClientError::FailedOver) => {}
                Err(e) => return Err(e),
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Err(ClientError::Timeout);
            }
            thread::sleep(self.shared.cfg.wait_interval);
        }
    }

    /// Ends the session. Idempotent.
    ///
    /// A published single-shard handle unpublishes first. Shards of a larger
    /// group cannot unpublish one at a time; use [`close_group`], or the
    /// server evicts the replica when the first shard closes.
    pub fn close(&mut self) {
        if self.state() == HandleState::Closed {
            return;
        }
        if matches!(self.state(), HandleState::Published(_)) && self.core().coord().num_shards == 1 {
            if let Err(e) = self.unpublish() {
                tracing::warn!(target: "ros::client", handle = %self.shared.key, error = %e, "unpublish on close failed");
            }
        }
        self.shared.stop.store(true, Ordering::SeqCst);
        let req = self.core().close();
        if let Some(req) = req {
            let conn = lock(&self.shared.session).conn.clone();
            if let Some(conn) = conn {
                let _ = conn.call(req, Some(OPEN_TIMEOUT));
                conn.close();
            }
        }
        self.shared.plane.service().detach(&self.shared.key);
        if let Some(t) = self.heartbeat.take() {
            let _ = t.join();
        }
        let seed = lock(&self.shared.seed).take();
        if let Some(t) = seed {
            let _ = t.join();
        }
        self.shared.transition("closed");
    }
}

impl Drop for ShardHandle {
    fn drop(&mut self) {
        self.close();
    }
}

/// Runs `f` on every handle at once, one thread each, as group operations
/// require.
pub fn on_each<T: Send>(
    handles: &mut [ShardHandle],
    f: impl Fn(&mut ShardHandle) -> Result<T, ClientError> + Sync,
) -> Vec<Result<T, ClientError>> {
    let f = &f;
    thread::scope(|s| {
        let running: Vec<_> = handles.iter_mut().map(|h| s.spawn(move || f(h))).collect();
        running
            .into_iter()
            .map(|t| t.join().unwrap_or_else(|_| Err(ClientError::InvalidState("shard thread panicked".into()))))
            .collect()
    })
}

/// Unpublishes every shard of a group together, then closes them.
pub fn close_group(handles: &mut [ShardHandle]) {
    for r in on_each(handles, |h| match h.state() {
        HandleState::Published(_) => h.unpublish(),
        _ => Ok(()),
    }) {
        if let Err(e) = r {
            tracing::warn!(target: "ros::client", error = %e, "unpublish on close failed");
        }
    }
    for h in handles {
        h.close();
    }
}

fn unexpected(reply: Reply) -> ClientError {
    ClientError::Server(ServerError::new(
        ros_core::ErrorCode::ProtocolViolation,
        format!("unexpected reply {reply:?}"),
    ))
}

impl Shared {
    fn transition(&self, what: &str) {
        tracing::info!(target: "ros::client", handle = %self.key, "{what}");
    }

    /// Connects to the first reachable server starting at `start` and opens
    /// the handle there.
    fn connect(self: &Arc<Self>, start: usize) -> Result<(Arc<Connection>, usize), ClientError> {
        let n = self.cfg.servers.len();
        let mut last = ClientError::Unavailable("no reference server configured".into());
        for i in 0..n {
            let idx = (start + i) % n;
            let addr = &self.cfg.servers[idx];
            let (conn, pushes) = match Connection::connect(addr) {
                Ok(c) => c,
                Err(e) => {
                    last = e;
                    continue;
                }
            };
            let req = lock(&self.core).open_request();
            match conn.call(req, Some(OPEN_TIMEOUT)) {
                Ok(reply) => {
                    lock(&self.core).opened(reply)?;
                    let weak = Arc::downgrade(self);
                    thread::Builder::new()
                        .name("ros-client-push".into())
                        .spawn(move || push_loop(weak, pushes))
                        .map_err(|e| ClientError::Unavailable(e.to_string()))?;
                    tracing::info!(target: "ros::client", handle = %self.key, server = %addr, "connected");
                    return Ok((Arc::new(conn), idx));
                }
                Err(e @ (ClientError::Unavailable(_) | ClientError::Timeout)) => last = e,
                Err(e) => return Err(e),
            }
        }
        Err(match last {
            ClientError::Timeout => ClientError::Unavailable("reference server did not answer".into()),
            e => e,
        })
    }

    fn conn(self: &Arc<Self>) -> Result<Arc<Connection>, ClientError> {
        let mut s = lock(&self.session);
        if let Some(c) = &s.conn {
            return Ok(c.clone());
        }
        // Every server was down last time; try again, and make the caller
        // restart its operation against the fresh session.
        let (conn, idx) = self.connect(s.server)?;
        s.conn = Some(conn);
        s.server = idx;
        Err(ClientError::FailedOver)
    }

    /// Sends one request. A lost connection triggers failover and fails the
    /// call with the retryable `FailedOver`.
    fn call(self: &Arc<Self>, req: ros_core::Request) -> Result<Reply, ClientError> {
        let conn = self.conn()?;
        match conn.call(req, None) {
            Err(ClientError::Unavailable(_)) => {
                self.failover(&conn)?;
                Err(ClientError::FailedOver)
            }
            other => other,
        }
    }

    fn failover(self: &Arc<Self>, failed: &Arc<Connection>) -> Result<(), ClientError> {
        let mut s = lock(&self.session);
        if let Some(c) = &s.conn {
            if !Arc::ptr_eq(c, failed) {
                return Ok(());
            }
        }
        s.conn = None;
        failed.close();
        if self.stop.load(Ordering::SeqCst) {
            return Err(ClientError::Unavailable("handle is closing".into()));
        }
        tracing::warn!(target: "ros::client", handle = %self.key, server = %failed.addr(), "server lost; failing over");
        lock(&self.core).reset_session();
        {
            // The new server knows nothing of this handle: stop serving, drop
            // host buffers, keep the registered bytes.
            let mut slots = self.store.write();
            slots.remove(&Role::Offload);
            slots.remove(&Role::Seed);
            if let Some(m) = slots.get_mut(&Role::Main) {
                m.serving = false;
            }
        }
        lock(&self.reassigned).clear();
        let (conn, idx) = self.connect(s.server + 1)?;
        s.conn = Some(conn);
        s.server = idx;
        self.transition("reset to unpublished after failover");
        Ok(())
    }

    fn on_push(&self, token: Token, directive: Directive) {
        match directive {
            Directive::Reassign(a) => {
                tracing::debug!(target: "ros::client", handle = %self.key, source = %a.source_replica, "reassigned");
                lock(&self.reassigned).insert(a.token, a);
            }
            Directive::OffloadRelease { replica, version, .. } => {
                let role = if replica.ends_with("+seed") { Role::Seed } else { Role::Offload };
                let mut slots = self.store.write();
                if slots.get(&role).is_some_and(|s| s.version == Some(version)) {
                    slots.remove(&role);
                    drop(slots);
                    self.transition(&format!("released {replica} v={version}"));
                }
            }
            Directive::OffloadFirst { version } => {
                tracing::warn!(target: "ros::client", %token, %version, "unsolicited offload request");
            }
        }
    }

    /// Pulls everything `job` still lacks into the slot at `role`.
    fn run_fill(self: &Arc<Self>, role: Role, mut job: FillJob) -> Result<FillJob, ClientError> {
        let own = self.plane.endpoint(&self.key).to_string();
        let transport = self.plane.transport().clone();
        let mut last_report = Instant::now();
        while !job.is_done() {
            if self.stop.load(Ordering::SeqCst) {
                return Err(ClientError::InvalidState("handle is closing".into()));
            }
            if let Some(a) = lock(&self.reassigned).remove(&job.assignment().token) {
                if a.op_seq == job.assignment().op_seq && a.version == job.assignment().version {
                    job.reassign(a);
                }
            }
            if last_report.elapsed() >= self.cfg.wait_interval {
                last_report = Instant::now();
                let req = lock(&self.core).progress(job.assignment(), job.progress());
                match self.call(req)? {
                    Reply::Ack => {}
                    Reply::Error(e) => return Err(e.into()),
                    other => return Err(unexpected(other)),
                }
            }
            let outcome = if job.assignment().source_endpoint == own {
                self.copy_local(role, &mut job)
            } else {
                let ep = job.endpoint()?;
                let req = job.request();
                let store = &self.store;
                transport.pull(&ep, &req, &mut |entries, bytes| {
                    let mut slots = store.write();
                    let slot = slots.get_mut(&role).ok_or(TransferError::NotServing)?;
                    job.accept(&mut slot.regions, entries, bytes)?;
                    slot.progress = job.progress();
                    Ok(())
                })
            };
            match outcome {
                Ok(PullStatus::Done) => {}
                Ok(PullStatus::RetryAfterProgress { .. }) => thread::sleep(BEHIND_POLL),
                Err(e) => {
                    let kind = if let Some(entry) = job.take_corrupt() {
                        job.note_corrupt(entry, self.cfg.checksum_retries)?;
                        FailureKind::Corrupt
                    } else if e.is_source_failure() {
                        FailureKind::Unreachable
                    } else {
                        FailureKind::NotServing
                    };
                    tracing::warn!(
                        target: "ros::client",
                        handle = %self.key,
                        source = %job.assignment().source_replica,
                        error = %e,
                        "pull failed; reporting {kind:?}"
                    );
                    let req = lock(&self.core).report(job.assignment(), kind);
                    match self.call(req)? {
                        Reply::Assignment(a) => job.reassign(a),
                        Reply::Ack => {}
                        Reply::Error(e) => return Err(e.into()),
                        other => return Err(unexpected(other)),
                    }
                }
            }
        }
        Ok(job)
    }

    /// Fills from another buffer of this same handle.
    fn copy_local(&self, role: Role, job: &mut FillJob) -> Result<PullStatus, TransferError> {
        let v = job.assignment().version;
        let mut slots = self.store.write();
        let (units, progress) = {
            let src = slots
                .iter()
                .find(|(r, s)| **r != role && s.serving && s.version == Some(v))
                .map(|(_, s)| s)
                .ok_or(TransferError::NotServing)?;
            let units: Vec<(std::ops::Range<usize>, Vec<u8>)> = job.units()[job.units_done()..]
                .iter()
                .enumerate()
                .take_while(|(_, u)| u.entries.end <= src.progress)
                .map(|(i, u)| (u.entries.clone(), src.regions.unit_bytes(job.units_done() + i).to_vec()))
                .collect();
            (units, src.progress)
        };
        let dst = slots.get_mut(&role).ok_or(TransferError::NotServing)?;
        for (entries, bytes) in units {
            job.accept(&mut dst.regions, entries, &bytes)?;
            dst.progress = job.progress();
        }
        Ok(if job.is_done() {
            PullStatus::Done
        } else {
            PullStatus::RetryAfterProgress { progress }
        })
    }

    /// Fills a seeding buffer in the background.
    fn start_seed(self: &Arc<Self>, a: SourceAssignment) -> Result<(), ClientError> {
        let mut seed = lock(&self.seed);
        if seed.as_ref().is_some_and(|t| !t.is_finished()) {
            return Ok(());
        }
        self.store.install(
            Role::Seed,
            Slot {
                version: Some(a.version),
                regions: Regions::zeroed(a.manifest.clone()),
                progress: 0,
                serving: true,
            },
        );
        self.transition(&format!("seeding v={} from {}", a.version, a.source_replica));
        let me = self.clone();
        *seed = Some(
            thread::Builder::new()
                .name("ros-seed".into())
                .spawn(move || {
                    let v = a.version;
                    let done = me.run_fill(Role::Seed, FillJob::new(a)).and_then(|job| {
                        let req = lock(&me.core).complete(job.assignment());
                        match me.call(req)? {
                            Reply::Ack => Ok(()),
                            Reply::Error(e) => Err(e.into()),
                            other => Err(unexpected(other)),
                        }
                    });
                    match done {
                        Ok(()) => me.transition(&format!("seed v={v} complete")),
                        Err(e) => {
                            me.store.remove(Role::Seed);
                            me.transition(&format!("seed v={v} abandoned: {e}"));
                        }
                    }
                })
                .map_err(|e| ClientError::Unavailable(e.to_string()))?,
        );
        Ok(())
    }
}

fn push_loop(shared: Weak<Shared>, pushes: Receiver<(Token, Directive)>) {
    for (token, directive) in pushes {
        let Some(s) = shared.upgrade() else { return };
        s.on_push(token, directive);
    }
}

fn heartbeat_loop(shared: Weak<Shared>, interval: Duration) {
    let tick = Duration::from_millis(20).min(interval);
    let mut last = Instant::now();
    loop {
        thread::sleep(tick);
        let Some(s) = shared.upgrade() else { return };
        if s.stop.load(Ordering::SeqCst) {
            return;
        }
        if last.elapsed() < interval {
            continue;
        }
        last = Instant::now();
        let Some(req) = lock(&s.core).heartbeat() else {
            // Not connected: keep trying the server list.
            let _ = s.conn();
            continue;
        };
        let conn = lock(&s.session).conn.clone();
        let Some(conn) = conn else { continue };
        if let Err(ClientError::Unavailable(_)) = conn.call(req, Some(interval.max(Duration::from_millis(500)))) {
            let _ = s.failover(&conn);
        }
    }
}
