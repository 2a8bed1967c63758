//! Virtual-time network for deterministic transfer experiments.
//!
//! A transfer job moves a list of units from one node's stream to another's,
//! one unit at a time and in order. A unit occupies the source's uplink, the
//! receiver's downlink and, across datacenters, the directed inter-DC link
//! for `len / rate` virtual seconds, where `rate` is the slowest of those.
//! Uplinks and downlinks are separate budgets, so a node can receive and
//! serve at full rate at once. A job only sends a unit the source already
//! holds, which is what makes pipelined chains work.
//!
//! Whenever resources free up, idle jobs are started greedily in creation
//! order. A source with several readers therefore serves them one after the
//! other rather than splitting its rate.

use std::collections::{BTreeMap, BTreeSet};

/// Virtual time in nanoseconds.
pub type Nanos = u64;

pub const NANOS_PER_SEC: u64 = 1_000_000_000;

pub fn secs(t: f64) -> Nanos {
    (t * NANOS_PER_SEC as f64).round() as Nanos
}

pub fn as_secs(t: Nanos) -> f64 {
    t as f64 / NANOS_PER_SEC as f64
}

/// Time to move `bytes` at `rate` bytes per second, rounded up.
pub fn transfer_time(bytes: u64, rate: u64) -> Nanos {
    assert!(rate > 0, "rates must be positive");
    ((bytes as u128 * NANOS_PER_SEC as u128).div_ceil(rate as u128)) as Nanos
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub datacenter: String,
    pub uplink: u64,
    pub downlink: u64,
}

/// Link rates in bytes per second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandwidthModel {
    pub nodes: BTreeMap<String, NodeSpec>,
    /// Directed inter-DC links; a missing pair is limited only by the nodes.
    pub dc_links: BTreeMap<(String, String), u64>,
    /// Rate of a copy between two buffers on the same node.
    pub local_copy: u64,
}

impl BandwidthModel {
    pub fn new(local_copy: u64) -> Self {
        BandwidthModel {
            nodes: BTreeMap::new(),
            dc_links: BTreeMap::new(),
            local_copy,
        }
    }

    pub fn add_node(&mut self, name: impl Into<String>, datacenter: impl Into<String>, uplink: u64, downlink: u64) {
        self.nodes.insert(
            name.into(),
            NodeSpec {
                datacenter: datacenter.into(),
                uplink,
                downlink,
            },
        );
    }

    /// Sets the rate of the links between two datacenters, both directions.
    pub fn link(&mut self, a: &str, b: &str, rate: u64) {
        self.dc_links.insert((a.into(), b.into()), rate);
        self.dc_links.insert((b.into(), a.into()), rate);
    }

    pub fn datacenter(&self, node: &str) -> &str {
        &self.node(node).datacenter
    }

    fn node(&self, node: &str) -> &NodeSpec {
        self.nodes.get(node).unwrap_or_else(|| panic!("unknown sim node {node:?}"))
    }

    /// Effective rate of a transfer from `src` to `dst`.
    pub fn rate(&self, src: &str, dst: &str) -> u64 {
        if src == dst {
            return self.local_copy;
        }
        let (s, d) = (self.node(src), self.node(dst));
        let mut rate = s.uplink.min(d.downlink);
        if s.datacenter != d.datacenter {
            if let Some(l) = self.dc_links.get(&(s.datacenter.clone(), d.datacenter.clone())) {
                rate = rate.min(*l);
            }
        }
        rate
    }
}

pub type JobId = u64;

/// A transfer of `units[start..]` from `(src, src_stream)` to `(dst, dst_stream)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobSpec {
    pub src: String,
    pub src_stream: String,
    pub dst: String,
    pub dst_stream: String,
    /// Length of every unit of the stream.
    pub units: Vec<u64>,
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetEvent {
    Delivered { job: JobId, unit: usize, at: Nanos },
    Finished { job: JobId, at: Nanos },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Resource {
    Up(String),
    Down(String),
    Link(String, String),
    Local(String),
}

#[derive(Debug, Clone)]
struct Job {
    spec: JobSpec,
    next: usize,
    in_flight: Option<Nanos>,
    done: bool,
    cancelled: bool,
    bytes: u64,
    resources: Vec<Resource>,
}

#[derive(Debug, Clone)]
pub struct SimNet {
    model: BandwidthModel,
    now: Nanos,
    next_id: JobId,
    jobs: BTreeMap<JobId, Job>,
    holdings: BTreeMap<(String, String), usize>,
    dead: BTreeSet<String>,
    dc_bytes: BTreeMap<(String, String), u64>,
    pending: Vec<NetEvent>,
}

impl SimNet {
    pub fn new(model: BandwidthModel) -> Self {
        SimNet {
            model,
            now: 0,
            next_id: 1,
            jobs: BTreeMap::new(),
            holdings: BTreeMap::new(),
            dead: BTreeSet::new(),
            dc_bytes: BTreeMap::new(),
            pending: Vec::new(),
        }
    }

    pub fn model(&self) -> &BandwidthModel {
        &self.model
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    /// Units of `stream` that `node` holds.
    pub fn holding(&self, node: &str, stream: &str) -> usize {
        self.holdings.get(&(node.to_string(), stream.to_string())).copied().unwrap_or(0)
    }

    pub fn set_holding(&mut self, node: &str, stream: &str, units: usize) {
        self.holdings.insert((node.to_string(), stream.to_string()), units);
        self.schedule();
    }

    pub fn drop_stream(&mut self, node: &str, stream: &str) {
        self.holdings.remove(&(node.to_string(), stream.to_string()));
    }

    pub fn start(&mut self, spec: JobSpec) -> JobId {
        let id = self.next_id;
        self.next_id += 1;
        let resources = if spec.src == spec.dst {
            vec![Resource::Local(spec.src.clone())]
        } else {
            let (sd, dd) = (self.model.datacenter(&spec.src), self.model.datacenter(&spec.dst));
            let mut r = vec![Resource::Up(spec.src.clone()), Resource::Down(spec.dst.clone())];
            if sd != dd {
                r.push(Resource::Link(sd.to_string(), dd.to_string()));
            }
            r
        };
        let done = spec.start >= spec.units.len();
        if done {
            self.pending.push(NetEvent::Finished { job: id, at: self.now });
        }
        self.jobs.insert(
            id,
            Job {
                next: spec.start,
                spec,
                in_flight: None,
                done,
                cancelled: false,
                bytes: 0,
                resources,
            },
        );
        self.schedule();
        id
    }

    /// Abandons a job; a unit in flight is lost.
    pub fn cancel(&mut self, job: JobId) {
        if let Some(j) = self.jobs.get_mut(&job) {
            j.cancelled = true;
            j.in_flight = None;
        }
        self.schedule();
    }

    pub fn is_active(&self, job: JobId) -> bool {
        self.jobs.get(&job).is_some_and(|j| !j.done && !j.cancelled)
    }

    /// Crashes a node: its transmissions stop mid-unit and it never sends
    /// again. Readers notice only through their own timeouts.
    pub fn kill(&mut self, node: &str) {
        self.dead.insert(node.to_string());
        for j in self.jobs.values_mut() {
            if j.spec.src == node || j.spec.dst == node {
                j.in_flight = None;
                if j.spec.dst == node {
                    j.cancelled = true;
                }
            }
        }
        self.schedule();
    }

    pub fn is_dead(&self, node: &str) -> bool {
        self.dead.contains(node)
    }

    /// Bytes delivered so far from datacenter `a` to datacenter `b`.
    pub fn dc_bytes(&self, a: &str, b: &str) -> u64 {
        self.dc_bytes.get(&(a.to_string(), b.to_string())).copied().unwrap_or(0)
    }

    pub fn cross_dc_bytes(&self) -> u64 {
        self.dc_bytes.iter().filter(|((a, b), _)| a != b).map(|(_, n)| n).sum()
    }

    pub fn job_bytes(&self, job: JobId) -> u64 {
        self.jobs.get(&job).map_or(0, |j| j.bytes)
    }

    pub fn job_progress(&self, job: JobId) -> usize {
        self.jobs.get(&job).map_or(0, |j| j.next)
    }

    /// Time of the next delivery, if anything is in flight.
    pub fn next_event(&self) -> Option<Nanos> {
        if !self.pending.is_empty() {
            return Some(self.now);
        }
        self.jobs.values().filter_map(|j| j.in_flight).min()
    }

    /// Moves the clock to the next delivery if it is due by `until`,
    /// otherwise to `until`, and returns what happened.
    pub fn advance(&mut self, until: Nanos) -> Vec<NetEvent> {
        if !self.pending.is_empty() {
            return std::mem::take(&mut self.pending);
        }
        let Some(t) = self.next_event().filter(|t| *t <= until) else {
            self.now = self.now.max(until);
            return Vec::new();
        };
        self.now = t;
        let mut events = Vec::new();
        let due: Vec<JobId> = self.jobs.iter().filter(|(_, j)| j.in_flight == Some(t)).map(|(id, _)| *id).collect();
        for id in due {
            let j = self.jobs.get_mut(&id).expect("due job exists");
            j.in_flight = None;
            let unit = j.next;
            let len = j.spec.units[unit];
            j.next += 1;
            j.bytes += len;
            let key = (j.spec.dst.clone(), j.spec.dst_stream.clone());
            let src_dc = self.model.datacenter(&j.spec.src).to_string();
            let dst_dc = self.model.datacenter(&j.spec.dst).to_string();
            events.push(NetEvent::Delivered { job: id, unit, at: t });
            if j.next == j.spec.units.len() {
                j.done = true;
                events.push(NetEvent::Finished { job: id, at: t });
            }
            let held = self.holdings.entry(key).or_insert(0);
            *held = (*held).max(unit + 1);
            *self.dc_bytes.entry((src_dc, dst_dc)).or_insert(0) += len;
        }
        self.schedule();
        events
    }

    fn schedule(&mut self) {
        let mut busy: BTreeSet<Resource> = self
            .jobs
            .values()
            .filter(|j| j.in_flight.is_some())
            .flat_map(|j| j.resources.iter().cloned())
            .collect();
        let ids: Vec<JobId> = self.jobs.keys().copied().collect();
        for id in ids {
            let j = &self.jobs[&id];
            if j.done || j.cancelled || j.in_flight.is_some() {
                continue;
            }
            if self.dead.contains(&j.spec.src) || self.dead.contains(&j.spec.dst) {
                continue;
            }
            let held = self.holding(&j.spec.src, &j.spec.src_stream);
            if held <= j.next || j.resources.iter().any(|r| busy.contains(r)) {
                continue;
            }
            let rate = self.model.rate(&j.spec.src, &j.spec.dst);
            let end = self.now + transfer_time(j.spec.units[j.next], rate);
            busy.extend(j.resources.iter().cloned());
            self.jobs.get_mut(&id).expect("job exists").in_flight = Some(end);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: u64 = 1_000_000;

    fn model(nodes: &[&str]) -> BandwidthModel {
        let mut m = BandwidthModel::new(100 * MB);
        for n in nodes {
            m.add_node(*n, "dc1", 10 * MB, 10 * MB);
        }
        m
    }

    fn job(src: &str, dst: &str, units: usize) -> JobSpec {
        JobSpec {
            src: src.into(),
            src_stream: "v1".into(),
            dst: dst.into(),
            dst_stream: "v1".into(),
            units: vec![MB; units],
            start: 0,
        }
    }

    fn run(net: &mut SimNet) -> BTreeMap<JobId, Nanos> {
        let mut done = BTreeMap::new();
        while net.next_event().is_some() {
            for e in net.advance(u64::MAX) {
                if let NetEvent::Finished { job, at } = e {
                    done.insert(job, at);
                }
            }
        }
        done
    }

    #[test]
    fn single_transfer_takes_size_over_rate() {
        let mut net = SimNet::new(model(&["a", "b"]));
        net.set_holding("a", "v1", 10);
        let j = net.start(job("a", "b", 10));
        assert_eq!(run(&mut net)[&j], secs(1.0));
        assert_eq!(net.holding("b", "v1"), 10);
        assert_eq!(net.dc_bytes("dc1", "dc1"), 10 * MB);
    }

    #[test]
    fn fan_in_on_one_uplink_is_sequential() {
        let mut net = SimNet::new(model(&["t", "r1", "r2", "r3"]));
        net.set_holding("t", "v1", 10);
        let ids: Vec<JobId> = ["r1", "r2", "r3"].iter().map(|r| net.start(job("t", r, 10))).collect();
        let done = run(&mut net);
        for (i, id) in ids.iter().enumerate() {
            assert_eq!(done[id], secs((i + 1) as f64));
        }
    }

    #[test]
    fn chain_adds_one_unit_per_hop() {
        let mut net = SimNet::new(model(&["t", "r1", "r2", "r3"]));
        net.set_holding("t", "v1", 10);
        let a = net.start(job("t", "r1", 10));
        let b = net.start(job("r1", "r2", 10));
        let c = net.start(job("r2", "r3", 10));
        let done = run(&mut net);
        assert_eq!(done[&a], secs(1.0));
        assert_eq!(done[&b], secs(1.1));
        assert_eq!(done[&c], secs(1.2));
    }

    #[test]
    fn inter_dc_link_limits_rate() {
        let mut m = model(&["t"]);
        m.add_node("far", "dc2", 10 * MB, 10 * MB);
        m.link("dc1", "dc2", 2 * MB);
        let mut net = SimNet::new(m);
        net.set_holding("t", "v1", 4);
        let j = net.start(job("t", "far", 4));
        assert_eq!(run(&mut net)[&j], secs(2.0));
        assert_eq!(net.cross_dc_bytes(), 4 * MB);
    }

    #[test]
    fn killed_source_stalls_reader_and_resume_skips_held_units() {
        let mut net = SimNet::new(model(&["t", "r1", "r2"]));
        net.set_holding("t", "v1", 10);
        net.set_holding("r1", "v1", 10);
        let j = net.start(job("r1", "r2", 10));
        net.advance(secs(0.35));
        net.advance(secs(0.35));
        net.advance(secs(0.35));
        net.advance(secs(0.35));
        assert_eq!(net.holding("r2", "v1"), 3);
        net.kill("r1");
        net.advance(secs(5.0));
        assert_eq!(net.now(), secs(5.0));
        assert_eq!(net.holding("r2", "v1"), 3);
        net.cancel(j);
        let k = net.start(JobSpec {
            start: 3,
            ..job("t", "r2", 10)
        });
        assert_eq!(run(&mut net)[&k], secs(5.7));
        assert_eq!(net.job_bytes(k), 7 * MB);
    }

    #[test]
    fn full_duplex_node_relays_at_full_rate() {
        let mut net = SimNet::new(model(&["a", "b", "c", "d"]));
        net.set_holding("a", "v1", 10);
        net.set_holding("b", "x", 10);
        let recv = net.start(job("a", "b", 10));
        let send = net.start(JobSpec {
            src_stream: "x".into(),
            ..job("b", "c", 10)
        });
        let done = run(&mut net);
        assert_eq!(done[&recv], secs(1.0));
        assert_eq!(done[&send], secs(1.0));
    }
}
