use std::ops::Range;
use std::sync::Arc;

use proptest::prelude::*;
use ros_core::{build_manifest, CompactionConfig, VersionId};
use ros_transfer::sim::{transfer_time, BandwidthModel, JobSpec, NetEvent, SimNet};
use ros_transfer::{
    Endpoint, MemNetwork, MemTransport, PeerService, PullRequest, PullStatus, Regions, Role, ShardStore, Slot,
    StageMode, StreamServer, StreamTransport, Transport, TransferError, TransportKind,
};

const V: VersionId = VersionId(3);

/// `n` entries of `len` bytes with distinct contents.
fn regions(seed: u8, n: usize, len: usize) -> Regions {
    let tensors: Vec<(String, Vec<u8>)> = (0..n)
        .map(|i| (format!("e{i:02}"), (0..len).map(|j| seed ^ (i * 31 + j) as u8).collect()))
        .collect();
    let m = build_manifest(&tensors, CompactionConfig::with_threshold(8)).unwrap();
    let bytes = m
        .entries()
        .iter()
        .map(|e| tensors.iter().find(|(n, _)| *n == e.name).unwrap().1.clone())
        .collect();
    Regions::new(m, bytes).unwrap()
}

fn serving_store(r: Regions, progress: usize) -> Arc<ShardStore> {
    let store = Arc::new(ShardStore::new(0));
    store.install(
        Role::Main,
        Slot {
            version: Some(V),
            regions: r,
            progress,
            serving: true,
        },
    );
    store
}

fn mem_peer(store: Arc<ShardStore>) -> (MemTransport, Endpoint, Arc<PeerService>) {
    let net = MemNetwork::new();
    let svc = PeerService::new();
    svc.attach("s0", store);
    net.register("node", svc.clone());
    (MemTransport::new(net), Endpoint::new(TransportKind::Mem, "node", "s0"), svc)
}

fn collect(t: &dyn Transport, ep: &Endpoint, range: Range<usize>) -> (Result<PullStatus, TransferError>, Vec<Range<usize>>) {
    let mut got = Vec::new();
    let status = t.pull(
        ep,
        &PullRequest {
            version: V,
            shard_idx: 0,
            entries: range,
        },
        &mut |entries, _| {
            got.push(entries);
            Ok(())
        },
    );
    (status, got)
}

#[test]
fn pull_from_complete_source() {
    let (t, ep, _svc) = mem_peer(serving_store(regions(1, 10, 16), 10));
    let (status, got) = collect(&t, &ep, 0..10);
    assert_eq!(status, Ok(PullStatus::Done));
    assert_eq!(got.len(), 10);
    assert_eq!(t.query_progress(&ep, V, 0), Ok(10));
}

#[test]
fn pull_beyond_progress_stops_at_prefix() {
    let (t, ep, _svc) = mem_peer(serving_store(regions(1, 10, 16), 7));
    let (status, got) = collect(&t, &ep, 5..10);
    assert_eq!(status, Ok(PullStatus::RetryAfterProgress { progress: 7 }));
    assert_eq!(got, vec![5..6, 6..7]);
}

#[test]
fn unpublished_and_unknown_versions_are_not_served() {
    let store = serving_store(regions(1, 4, 16), 4);
    let (t, ep, _svc) = mem_peer(store.clone());
    assert_eq!(t.query_progress(&ep, VersionId(9), 0), Err(TransferError::NotServing));
    store.with_mut(Role::Main, |s| s.serving = false);
    assert_eq!(t.query_progress(&ep, V, 0), Err(TransferError::NotServing));
    assert_eq!(collect(&t, &ep, 0..4).0, Err(TransferError::NotServing));
    let gone = Endpoint::new(TransportKind::Mem, "elsewhere", "s0");
    assert!(t.query_progress(&gone, V, 0).unwrap_err().is_source_failure());
}

#[test]
fn down_service_looks_unreachable() {
    let (t, ep, svc) = mem_peer(serving_store(regions(1, 4, 16), 4));
    svc.faults().set_down(true);
    assert!(collect(&t, &ep, 0..4).0.unwrap_err().is_source_failure());
}

fn fill(t: &dyn Transport, ep: &Endpoint, dst: &mut Regions) -> Result<(), TransferError> {
    let n = dst.manifest().len();
    let mut at = 0;
    while at < n {
        let status = t.pull(
            ep,
            &PullRequest {
                version: V,
                shard_idx: 0,
                entries: at..n,
            },
            &mut |entries, bytes| {
                let u = dst.unit_at(entries.start).expect("unit boundary");
                dst.verify(u, bytes)
                    .map_err(|e| TransferError::Protocol(format!("entry {e} failed its checksum")))?;
                dst.write_unit(u, bytes);
                at = entries.end;
                Ok(())
            },
        )?;
        if let PullStatus::RetryAfterProgress { .. } = status {
            std::thread::yield_now();
        }
    }
    Ok(())
}

#[test]
fn transports_deliver_identical_bytes() {
    // Mixed sizes so that packed groups are exercised too.
    let tensors: Vec<(String, Vec<u8>)> = (0..40)
        .map(|i| (format!("w{i}"), vec![(i * 7) as u8; if i % 3 == 0 { 3 } else { 100 + i }]))
        .collect();
    let m = build_manifest(&tensors, CompactionConfig::with_threshold(8)).unwrap();
    let ordered = m
        .entries()
        .iter()
        .map(|e| tensors.iter().find(|(n, _)| *n == e.name).unwrap().1.clone())
        .collect();
    let src = Regions::new(m.clone(), ordered).unwrap();
    let store = serving_store(src.clone(), m.len());

    let (mem, mem_ep, svc) = mem_peer(store);
    let mut a = Regions::zeroed(m.clone());
    fill(&mem, &mem_ep, &mut a).unwrap();

    let direct = StreamServer::spawn("127.0.0.1:0", svc.clone(), StageMode::Direct, 8).unwrap();
    let staged = StreamServer::spawn("127.0.0.1:0", svc, StageMode::Staged, 8).unwrap();
    let tcp = StreamTransport::default();
    let mut b = Regions::zeroed(m.clone());
    fill(&tcp, &direct.endpoint("s0"), &mut b).unwrap();
    let mut c = Regions::zeroed(m.clone());
    fill(&tcp, &staged.endpoint("s0"), &mut c).unwrap();

    // The simulated transport moves the same units in the same order.
    let mut model = BandwidthModel::new(1 << 30);
    model.add_node("src", "dc1", 1 << 20, 1 << 20);
    model.add_node("dst", "dc1", 1 << 20, 1 << 20);
    let mut net = SimNet::new(model);
    net.set_holding("src", "v3", src.units().len());
    net.start(JobSpec {
        src: "src".into(),
        src_stream: "v3".into(),
        dst: "dst".into(),
        dst_stream: "v3".into(),
        units: src.units().iter().map(|u| u.len).collect(),
        start: 0,
    });
    let mut d = Regions::zeroed(m);
    while net.next_event().is_some() {
        for e in net.advance(u64::MAX) {
            if let NetEvent::Delivered { unit, .. } = e {
                let bytes = src.unit_bytes(unit).to_vec();
                d.verify(unit, &bytes).unwrap();
                d.write_unit(unit, &bytes);
            }
        }
    }

    for r in [&a, &b, &c, &d] {
        assert_eq!(r.tensors(), src.tensors());
    }
}

#[test]
fn stream_reports_progress_and_not_serving() {
    let store = serving_store(regions(2, 6, 32), 4);
    let svc = PeerService::new();
    svc.attach("k", store.clone());
    let server = StreamServer::spawn("127.0.0.1:0", svc, StageMode::Direct, 8).unwrap();
    let t = StreamTransport::default();
    let ep = server.endpoint("k");
    assert_eq!(t.query_progress(&ep, V, 0), Ok(4));
    let (status, got) = collect(&t, &ep, 2..6);
    assert_eq!(status, Ok(PullStatus::RetryAfterProgress { progress: 4 }));
    assert_eq!(got, vec![2..3, 3..4]);
    assert_eq!(t.query_progress(&server.endpoint("other"), V, 0), Err(TransferError::NotServing));
    server.shutdown();
    assert!(t.query_progress(&ep, V, 0).unwrap_err().is_source_failure());
}

#[test]
fn injected_corruption_is_caught_by_checksums() {
    let src = regions(3, 5, 64);
    let m = src.manifest().clone();
    let (t, ep, svc) = mem_peer(serving_store(src, 5));
    svc.faults().corrupt_next(1);
    let mut dst = Regions::zeroed(m.clone());
    let err = fill(&t, &ep, &mut dst).unwrap_err();
    assert!(matches!(err, TransferError::Protocol(ref s) if s.contains("checksum")), "{err}");
    let mut dst = Regions::zeroed(m);
    fill(&t, &ep, &mut dst).unwrap();
}

#[test]
fn staged_corruption_over_tcp() {
    let src = regions(4, 3, 64);
    let m = src.manifest().clone();
    let svc = PeerService::new();
    svc.attach("k", serving_store(src, 3));
    svc.faults().corrupt_next(1);
    let server = StreamServer::spawn("127.0.0.1:0", svc, StageMode::Staged, 8).unwrap();
    let mut dst = Regions::zeroed(m);
    assert!(fill(&StreamTransport::default(), &server.endpoint("k"), &mut dst).is_err());
    fill(&StreamTransport::default(), &server.endpoint("k"), &mut dst).unwrap();
}

proptest! {
    #[test]
    fn responses_never_exceed_progress(progress in 0usize..=12, lo in 0usize..12, span in 0usize..12) {
        let (t, ep, _svc) = mem_peer(serving_store(regions(5, 12, 8 + 1), progress));
        let hi = (lo + span).min(12);
        let (status, got) = collect(&t, &ep, lo..hi);
        let status = status.unwrap();
        for r in &got {
            prop_assert!(r.end <= progress);
            prop_assert!(r.start >= lo && r.end <= hi);
        }
        let served = got.last().map_or(lo, |r| r.end);
        if hi <= progress || lo >= hi {
            prop_assert_eq!(status, PullStatus::Done);
            prop_assert_eq!(served, hi.max(lo));
        } else {
            prop_assert_eq!(status, PullStatus::RetryAfterProgress { progress });
            prop_assert_eq!(served, progress.max(lo));
        }
    }

    #[test]
    fn sim_links_never_exceed_their_rate(
        sizes in proptest::collection::vec(1u64..5_000, 1..20),
        readers in 1usize..5,
        chain in any::<bool>(),
    ) {
        let rate = 1_000u64;
        let mut model = BandwidthModel::new(rate * 100);
        model.add_node("src", "dc1", rate, rate);
        for r in 0..readers {
            model.add_node(format!("r{r}"), "dc1", rate, rate);
        }
        let mut net = SimNet::new(model);
        net.set_holding("src", "s", sizes.len());
        for r in 0..readers {
            let from = if chain && r > 0 { format!("r{}", r - 1) } else { "src".to_string() };
            net.start(JobSpec {
                src: from,
                src_stream: "s".into(),
                dst: format!("r{r}"),
                dst_stream: "s".into(),
                units: sizes.clone(),
                start: 0,
            });
        }
        let mut last = 0;
        while net.next_event().is_some() {
            for e in net.advance(u64::MAX) {
                if let NetEvent::Finished { at, .. } = e {
                    last = last.max(at);
                }
            }
        }
        let total: u64 = sizes.iter().sum();
        // Every reader got everything, and the busiest uplink needed at
        // least its bytes over its rate.
        prop_assert_eq!(net.dc_bytes("dc1", "dc1"), total * readers as u64);
        let busiest = if chain { total } else { total * readers as u64 };
        prop_assert!(last >= transfer_time(busiest, rate) - sizes.len() as u64 * readers as u64);
    }
}
