//! Demo worker loops: a trainer group publishing a new version every step
//! and rollout groups following the latest one.

use std::io::Read;
use std::sync::mpsc::Receiver;
use std::thread;
use std::time::{Duration, Instant};

use ros_client::{close_group, on_each, ClientConfig, ClientError, DataPlane, HandleState, ShardHandle};
use ros_core::{RetentionRule, ShardCoord, VersionId, VersionSpec};
use ros_server::runtime;
use ros_transfer::{MemNetwork, StageMode};

use crate::exit::{Code, Failure, Result};
use crate::synth::{self, Layout};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportChoice {
    Mem,
    Stream,
    Sim,
}

impl std::str::FromStr for TransportChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mem" => Ok(TransportChoice::Mem),
            "stream" => Ok(TransportChoice::Stream),
            "sim" => Ok(TransportChoice::Sim),
            other => Err(format!("unknown transport {other:?} (mem, stream, sim)")),
        }
    }
}

/// Where a group's peers serve from.
#[derive(Clone)]
pub enum Plane {
    Mem(MemNetwork),
    /// Address to bind the peer service to.
    Stream(String),
}

impl Plane {
    fn open(&self, host: &str) -> Result<DataPlane> {
        match self {
            Plane::Mem(net) => Ok(DataPlane::mem(net, host)),
            Plane::Stream(bind) => Ok(DataPlane::stream(bind, StageMode::Staged)?),
        }
    }
}

/// One replica group hosted by this process, a handle per shard.
#[derive(Clone)]
pub struct GroupOpts {
    pub servers: Vec<String>,
    pub dc: String,
    pub spot: bool,
    pub model: String,
    pub replica: String,
    pub shards: u32,
    pub layout: Layout,
    pub plane: Plane,
    pub retain: Vec<u32>,
}

impl GroupOpts {
    fn client(&self) -> ClientConfig {
        let mut c = ClientConfig::new(self.servers.clone());
        c.datacenter = self.dc.clone();
        c.spot = self.spot;
        c.heartbeat_interval = Duration::from_millis(250);
        c.wait_interval = Duration::from_millis(20);
        c
    }

    fn open(&self) -> Result<(DataPlane, Vec<ShardHandle>)> {
        let plane = self.plane.open(&self.replica)?;
        let cfg = self.client();
        let retain = RetentionRule::lags(self.retain.iter().copied());
        let mut handles = Vec::new();
        for i in 0..self.shards {
            let coord = ShardCoord::new(self.model.clone(), self.replica.clone(), self.shards, i);
            handles.push(ShardHandle::open(&cfg, &plane, coord, retain.clone())?);
        }
        Ok((plane, handles))
    }
}

/// What a worker saw of one shard at the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardDigest {
    pub shard: u32,
    pub version: u64,
    pub digest: u64,
}

fn all<T>(results: Vec<std::result::Result<T, ClientError>>) -> Result<Vec<T>> {
    results.into_iter().map(|r| r.map_err(Failure::from)).collect()
}

fn say(who: &str, what: impl AsRef<str>) {
    println!("{who} {}", what.as_ref());
}

/// How long a trainer keeps its last version published.
pub enum Linger {
    For(Duration),
    /// Until standard input closes.
    UntilEof,
    /// Until a message arrives or the sender goes away.
    Until(Receiver<()>),
}

impl Linger {
    fn wait(self) {
        match self {
            Linger::For(d) => thread::sleep(d),
            Linger::UntilEof => {
                let mut sink = Vec::new();
                let _ = std::io::stdin().read_to_end(&mut sink);
            }
            Linger::Until(rx) => {
                let _ = rx.recv();
            }
        }
    }
}

pub struct TrainerOpts {
    pub group: GroupOpts,
    pub first: u64,
    pub steps: u64,
    /// Time between publish and unpublish of every step but the last.
    pub rollout_time: Duration,
    pub linger: Linger,
    /// Flip one bit of the first unit served after the first publish.
    pub corrupt_once: bool,
}

/// Publishes `steps` versions, mutating the weights in between. Returns
/// the digests of the last version.
pub fn trainer(opts: TrainerOpts) -> Result<Vec<ShardDigest>> {
    let g = &opts.group;
    let who = g.replica.as_str();
    let (plane, mut handles) = g.open()?;
    for (i, h) in handles.iter_mut().enumerate() {
        h.register(synth::weights(&g.model, i as u32, opts.first, g.layout))?;
    }
    let mut last = Vec::new();
    for step in 0..opts.steps {
        let v = opts.first + step;
        if step > 0 {
            for (i, h) in handles.iter_mut().enumerate() {
                for t in 0..g.layout.tensors {
                    h.tensor_mut(&Layout::name(t), |b| synth::fill(&g.model, i as u32, t, v, b))?;
                }
            }
        }
        all(on_each(&mut handles, |h| h.publish(VersionId(v))))?;
        last = digests(&handles, v);
        for d in &last {
            say(who, format!("published v={v} shard={} digest={:016x}", d.shard, d.digest));
        }
        if step == 0 && opts.corrupt_once {
            plane.service().faults().corrupt_next(1);
            say(who, "will corrupt the next unit it serves");
        }
        if step + 1 == opts.steps {
            break;
        }
        thread::sleep(opts.rollout_time);
        all(on_each(&mut handles, |h| h.unpublish()))?;
        say(who, format!("unpublished v={v}"));
    }
    opts.linger.wait();
    close_group(&mut handles);
    say(who, "closed");
    Ok(last)
}

fn digests(handles: &[ShardHandle], v: u64) -> Vec<ShardDigest> {
    handles
        .iter()
        .enumerate()
        .map(|(i, h)| ShardDigest {
            shard: i as u32,
            version: v,
            digest: h.fingerprint().unwrap_or(0),
        })
        .collect()
}

pub struct RolloutOpts {
    pub group: GroupOpts,
    /// Keep following `latest` until this version is held.
    pub until: Option<u64>,
    pub poll: Duration,
    pub timeout: Duration,
}

/// Replicates the latest version, follows newer ones, then checks every
/// byte against the synthetic weights of the version held.
pub fn rollout(opts: RolloutOpts) -> Result<Vec<ShardDigest>> {
    let g = &opts.group;
    let who = g.replica.as_str();
    let (_plane, mut handles) = g.open()?;
    for h in handles.iter_mut() {
        h.register(synth::zeros(g.layout))?;
    }
    let deadline = Instant::now() + opts.timeout;
    let versions = all(on_each(&mut handles, |h| h.replicate(VersionSpec::LATEST)))?;
    let mut held = versions[0].0;
    say(who, format!("replicated v={held}"));
    while opts.until.is_some_and(|u| held < u) {
        if Instant::now() > deadline {
            close_group(&mut handles);
            return Err(Failure::new(Code::Runtime, format!("still at v={held} after {:?}", opts.timeout)));
        }
        thread::sleep(opts.poll);
        let results = on_each(&mut handles, |h| match h.state() {
            HandleState::Published(_) => h.update(VersionSpec::LATEST),
            // A failover left the handle unpublished; its bytes are intact.
            _ => h.replicate(VersionSpec::LATEST).map(|_| true),
        });
        match results.into_iter().collect::<std::result::Result<Vec<bool>, _>>() {
            Ok(changed) if changed.iter().any(|c| *c) => {
                held = handles[0].current_version().map_or(held, |v| v.0);
                say(who, format!("updated v={held}"));
            }
            Ok(_) => {}
            Err(e) if e.is_retryable() => say(who, format!("retrying: {e}")),
            Err(e) => {
                close_group(&mut handles);
                return Err(e.into());
            }
        }
    }
    let out = verify(g, &handles, held);
    close_group(&mut handles);
    let out = out?;
    for d in &out {
        say(who, format!("verified v={} shard={} digest={:016x}", d.version, d.shard, d.digest));
    }
    Ok(out)
}

fn verify(g: &GroupOpts, handles: &[ShardHandle], v: u64) -> Result<Vec<ShardDigest>> {
    for (i, h) in handles.iter().enumerate() {
        for t in 0..g.layout.tensors {
            let bad = h.tensor(&Layout::name(t), |b| synth::first_mismatch(&g.model, i as u32, v, t, b))?;
            if let Some(t) = bad {
                return Err(Failure::new(
                    Code::Integrity,
                    format!("shard {i} tensor {} differs from v={v}", Layout::name(t)),
                ));
            }
        }
    }
    Ok(digests(handles, v))
}

pub struct DemoOpts {
    pub transport: TransportChoice,
    pub model: String,
    pub shards: u32,
    pub layout: Layout,
    pub steps: u64,
    pub rollouts: usize,
    pub rollout_time: Duration,
}

/// A server, one trainer group and `rollouts` rollout groups in one
/// process. Fails unless every rollout ends on the trainer's last version
/// with identical bytes.
pub fn demo(opts: DemoOpts) -> Result<()> {
    let net = MemNetwork::new();
    let plane_for = |_: &str| match opts.transport {
        TransportChoice::Stream => Ok(Plane::Stream("127.0.0.1:0".into())),
        TransportChoice::Mem => Ok(Plane::Mem(net.clone())),
        TransportChoice::Sim => Err(Failure::usage("the demo runs real handles; use --transport mem or stream")),
    };
    let server = runtime::spawn(&ros_server::Config {
        listen: "127.0.0.1:0".into(),
        ..ros_server::Config::default()
    })
    .map_err(|e| Failure::new(Code::Runtime, format!("cannot start server: {e}")))?;
    let group = |replica: &str, retain: Vec<u32>| -> Result<GroupOpts> {
        Ok(GroupOpts {
            servers: vec![server.local_addr().to_string()],
            dc: "dc0".into(),
            spot: false,
            model: opts.model.clone(),
            replica: replica.into(),
            shards: opts.shards,
            layout: opts.layout,
            plane: plane_for(replica)?,
            retain,
        })
    };
    let last = opts.steps.saturating_sub(1);
    let (done_tx, done_rx) = std::sync::mpsc::channel();
    let trainer_opts = TrainerOpts {
        group: group("trainer-0", Vec::new())?,
        first: 0,
        steps: opts.steps,
        rollout_time: opts.rollout_time,
        linger: Linger::Until(done_rx),
        corrupt_once: false,
    };
    let rollouts: Vec<RolloutOpts> = (0..opts.rollouts)
        .map(|i| {
            Ok(RolloutOpts {
                group: group(&format!("rollout-{i}"), vec![0])?,
                until: Some(last),
                poll: Duration::from_millis(20),
                timeout: Duration::from_secs(60),
            })
        })
        .collect::<Result<_>>()?;
    let (trained, followed) = thread::scope(|s| {
        let t = s.spawn(move || trainer(trainer_opts));
        let rs: Vec<_> = rollouts.into_iter().map(|r| s.spawn(move || rollout(r))).collect();
        let followed: Vec<Result<Vec<ShardDigest>>> =
            rs.into_iter().map(|h| h.join().expect("rollout thread panicked")).collect();
        let _ = done_tx.send(());
        (t.join().expect("trainer thread panicked"), followed)
    });
    let trained = trained?;
    for (i, f) in followed.into_iter().enumerate() {
        let f = f?;
        if f != trained {
            return Err(Failure::new(Code::Integrity, format!("rollout-{i} ended with {f:?}, trainer with {trained:?}")));
        }
    }
    say("demo", format!("all {} rollouts hold v={last} byte for byte", opts.rollouts));
    server.shutdown();
    Ok(())
}
