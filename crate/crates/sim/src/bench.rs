//! Parameterized scenarios measured on the simulated network.
//!
//! Each scenario builds a [`Script`], runs it and summarizes the fills:
//! per-actor foreground stall, bytes per datacenter pair and a CSV with one
//! row per fill. Times in the CSV are rendered from integer nanoseconds so
//! repeated runs are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ros_core::VersionSpec;
use ros_transfer::sim::{as_secs, secs, transfer_time, Nanos};
use ros_transfer::Role;

use crate::script::{ActorDef, LinkDef, NodeDef, Payload, Script};
use crate::trace::fmt_time;
use crate::{run_script, Action, FillRecord, Run, SimError, Step};

/// Shard size and link rate shared by the scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub entries: usize,
    pub entry_bytes: u64,
    /// Intra-datacenter node rate, bytes/s.
    pub rate: u64,
}

impl Default for Shape {
    fn default() -> Self {
        Shape {
            entries: 1000,
            entry_bytes: 1_000_000,
            rate: 1_000_000_000,
        }
    }
}

impl Shape {
    pub fn shard_bytes(&self) -> u64 {
        self.entries as u64 * self.entry_bytes
    }

    /// Time to move one shard at the node rate.
    pub fn shard_time(&self) -> Nanos {
        transfer_time(self.shard_bytes(), self.rate)
    }

    pub fn unit_time(&self) -> Nanos {
        transfer_time(self.entry_bytes, self.rate)
    }

    fn script(&self, name: String) -> Script {
        let mut s = Script {
            name,
            payload: Payload {
                entries: self.entries,
                entry_bytes: self.entry_bytes,
            },
            ..Script::default()
        };
        s.net.rate = self.rate;
        // Every entry travels as its own unit.
        s.server.compaction_threshold = Some(self.entry_bytes);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub actor: String,
    pub role: Role,
    pub version: u64,
    pub t_start: Nanos,
    pub t_end: Nanos,
    pub bytes: u64,
    pub sources: Vec<String>,
    pub cross_dc: bool,
}

impl Row {
    pub fn stall(&self) -> Nanos {
        self.t_end - self.t_start
    }

    fn from_record(r: &FillRecord) -> Row {
        Row {
            actor: r.actor.clone(),
            role: r.role,
            version: r.version.0,
            t_start: r.t_start,
            t_end: r.t_end,
            bytes: r.bytes,
            sources: r.sources.clone(),
            cross_dc: r.cross_dc,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub scenario: String,
    pub rows: Vec<Row>,
    pub dc_bytes: BTreeMap<(String, String), u64>,
    pub run: Run,
}

impl BenchReport {
    fn new(scenario: String, run: Run) -> BenchReport {
        let mut rows: Vec<Row> = run.records.iter().map(Row::from_record).collect();
        rows.sort_by(|a, b| (a.t_end, &a.actor).cmp(&(b.t_end, &b.actor)));
        BenchReport {
            scenario,
            rows,
            dc_bytes: run.dc_bytes.clone(),
            run,
        }
    }

    /// Foreground fills only; background seed fills stall nobody.
    pub fn foreground(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(|r| r.role == Role::Main)
    }

    /// Foreground stall of each actor, summed over its fills.
    pub fn stall(&self) -> BTreeMap<String, Nanos> {
        let mut out = BTreeMap::new();
        for r in self.foreground() {
            *out.entry(r.actor.clone()).or_default() += r.stall();
        }
        out
    }

    pub fn total_stall(&self) -> Nanos {
        self.foreground().map(Row::stall).sum()
    }

    pub fn row(&self, actor: &str) -> Option<&Row> {
        self.foreground().find(|r| r.actor == actor)
    }

    pub fn cross_dc_bytes(&self) -> u64 {
        self.run.cross_dc_bytes()
    }

    /// Fills of any role that crossed datacenters.
    pub fn cross_dc_fills(&self) -> usize {
        self.rows.iter().filter(|r| r.cross_dc).count()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("scenario,actor,role,version,t_start,t_end,stall,bytes,sources,cross_dc\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:?},{},{},{},{},{},{},{}",
                self.scenario,
                r.actor,
                r.role,
                r.version,
                fmt_time(r.t_start),
                fmt_time(r.t_end),
                fmt_time(r.stall()),
                r.bytes,
                r.sources.join(">"),
                r.cross_dc
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("scenario {}\n", self.scenario);
        for (actor, stall) in self.stall() {
            let _ = writeln!(out, "  stall {actor} {:.6}s", as_secs(stall));
        }
        let _ = writeln!(out, "  total stall {:.6}s", as_secs(self.total_stall()));
        for ((a, b), n) in &self.dc_bytes {
            let _ = writeln!(out, "  bytes {a}->{b} {n}");
        }
        out
    }
}

fn actor(id: impl Into<String>, dc: &str) -> ActorDef {
    ActorDef {
        id: id.into(),
        model: "m".into(),
        replica: None,
        shards: 1,
        dc: dc.into(),
        spot: false,
        retain: Vec::new(),
        node: None,
    }
}

fn join(s: &mut Script, at: f64, id: &str) {
    s.steps.push(Step::new(at, id, Action::Open));
    s.steps.push(Step::new(at, id, Action::Register));
}

fn publisher(s: &mut Script, id: &str, dc: &str) {
    s.actors.push(actor(id, dc));
    join(s, 0.0, id);
    s.steps.push(Step::new(0.0, id, Action::Publish).version(1));
}

/// Readers join after the publish has settled.
const READ_AT: f64 = 0.01;

pub fn rollout(i: usize) -> String {
    format!("rollout-{i}")
}

/// One trainer publishes; `n` rollouts replicate it at the same instant.
pub fn fanout_script(shape: Shape, n: usize, pipeline: bool) -> Script {
    let mut s = shape.script(format!("fanout-n{n}-{}", if pipeline { "pipeline" } else { "direct" }));
    s.server.pipeline = pipeline;
    publisher(&mut s, "trainer", "dc0");
    for i in 0..n {
        let id = rollout(i);
        s.actors.push(actor(&id, "dc0"));
        join(&mut s, READ_AT, &id);
        s.steps.push(Step::new(READ_AT, &id, Action::Replicate).spec(VersionSpec::absolute(1)));
    }
    s
}

pub fn fanout(shape: Shape, n: usize, pipeline: bool) -> Result<BenchReport, SimError> {
    let s = fanout_script(shape, n, pipeline);
    Ok(BenchReport::new(s.name.clone(), run_script(&s)?))
}

/// Two published sources; the reader is assigned `source-a`, which dies
/// `crash_at` seconds after the read starts.
pub fn failure_script(shape: Shape, crash_at: f64) -> Script {
    let mut s = shape.script(format!("failure-at-{crash_at}"));
    publisher(&mut s, "source-a", "dc0");
    publisher(&mut s, "source-b", "dc0");
    s.actors.push(actor("rollout", "dc0"));
    join(&mut s, READ_AT, "rollout");
    s.steps.push(Step::new(READ_AT, "rollout", Action::Replicate).spec(VersionSpec::absolute(1)));
    s.steps.push(Step::new(READ_AT + crash_at, "source-a", Action::Crash));
    s
}

pub fn failure(shape: Shape, crash_at: f64) -> Result<BenchReport, SimError> {
    let s = failure_script(shape, crash_at);
    Ok(BenchReport::new(s.name.clone(), run_script(&s)?))
}

/// Delay a source crash `crash_at` seconds into a read adds to it: the
/// detection timeout plus the suffix the reader did not yet hold, less
/// the time the reader would have spent on that suffix anyway.
pub fn failure_extra_delay(shape: Shape, crash_at: f64, detect: f64) -> Nanos {
    let t = secs(crash_at);
    if t >= shape.shard_time() {
        return 0;
    }
    let held = (t / shape.unit_time()).min(shape.entries as u64);
    let suffix = shape.shard_bytes() - held * shape.entry_bytes;
    secs(detect) + transfer_time(suffix, shape.rate) - (shape.shard_time() - t)
}

/// Cross-datacenter policy. The baseline has both switches off: every
/// rollout reads the trainer over the inter-DC link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CrossDc {
    /// Skip-aware updates, with pipelining so local readers can chain.
    pub smart_skip: bool,
    /// The first rollout asks for a background seeding buffer.
    pub offload_seed: bool,
}

impl CrossDc {
    pub const BASELINE: CrossDc = CrossDc {
        smart_skip: false,
        offload_seed: false,
    };
    pub const SMART: CrossDc = CrossDc {
        smart_skip: true,
        offload_seed: true,
    };

    fn label(&self) -> &'static str {
        match (self.smart_skip, self.offload_seed) {
            (false, false) => "baseline",
            (true, false) => "skip",
            (false, true) => "seed",
            (true, true) => "smart",
        }
    }
}

/// A trainer in `dc-a` and `n` polling rollouts in `dc-b`; the inter-DC
/// link runs at a quarter of the node rate.
pub fn crossdc_script(shape: Shape, n: usize, mode: CrossDc) -> Script {
    let mut s = shape.script(format!("crossdc-n{n}-{}", mode.label()));
    s.server.smart_skipping = mode.smart_skip;
    s.server.pipeline = mode.smart_skip;
    s.net.links.push(LinkDef {
        a: "dc-a".into(),
        b: "dc-b".into(),
        rate: shape.rate / 4,
    });
    s.nodes.push(NodeDef {
        name: "trainer".into(),
        dc: "dc-a".into(),
        up: None,
        down: None,
    });
    publisher(&mut s, "trainer", "dc-a");
    s.actors.last_mut().expect("just pushed").node = Some("trainer".into());
    for i in 0..n {
        let id = rollout(i);
        s.actors.push(actor(&id, "dc-b"));
        join(&mut s, READ_AT, &id);
        let at = READ_AT + 0.001 * i as f64;
        s.steps.push(
            Step::new(at, &id, Action::Update)
                .spec(VersionSpec::LATEST)
                .poll(0.1)
                .seeding(mode.offload_seed && i == 0),
        );
    }
    s
}

pub fn crossdc(shape: Shape, n: usize, mode: CrossDc) -> Result<BenchReport, SimError> {
    let s = crossdc_script(shape, n, mode);
    Ok(BenchReport::new(s.name.clone(), run_script(&s)?))
}

/// Least-squares fit of `y = c·x` through the origin: `(c, r²)`.
pub fn fit_through_origin(points: &[(f64, f64)]) -> (f64, f64) {
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    let c = sxy / sxx;
    let mean = points.iter().map(|(_, y)| y).sum::<f64>() / points.len() as f64;
    let ss_res: f64 = points.iter().map(|(x, y)| (y - c * x).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|(_, y)| (y - mean).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (c, r2)
}
