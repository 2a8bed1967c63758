mod common;

use std::time::Duration;

use common::*;
use ros_core::{Directive, ErrorCode, FailureKind, Reply, Request, RetentionRule, UpdateDecision, VersionId, VersionSpec};
use ros_server::{Lifecycle, ReplicaKind, ServerConfig};

#[test]
fn open_full_group_and_reject_bad_coordinates() {
    let mut h = Harness::new();
    let g = h.group("trainer-0", 8);
    assert_eq!(g.len(), 8);
    let view = h.server.replica(MODEL, "trainer-0").unwrap();
    assert_eq!(view.lifecycle, Lifecycle::Registered);
    assert_eq!(view.shard_states.len(), 8);

    let r = h.try_open("rollout-0", 2, 3, "dc1", false, RetentionRule::none());
    assert_eq!(error_code(r), ErrorCode::InvalidGroup);
    let r = h.try_open("trainer-0", 8, 1, "dc1", false, RetentionRule::none());
    assert_eq!(error_code(r), ErrorCode::AlreadyOpen);
    let r = h.try_open("trainer-0", 4, 1, "dc1", false, RetentionRule::none());
    assert_eq!(error_code(r), ErrorCode::InvalidGroup);
}

#[test]
fn reopen_after_close() {
    let mut h = Harness::new();
    for _ in 0..3 {
        let s = h.open("trainer-0", 1, 0);
        let id = h.send(s.client, Request::Close { token: s.token });
        assert_eq!(h.reply(id), Reply::Ack);
        assert_eq!(h.server.open_handles(), 0);
    }
    let id = h.send(1, Request::Heartbeat { token: ros_core::Token(1) });
    assert_eq!(error_code(h.reply(id)), ErrorCode::UnknownHandle);
}

#[test]
fn publish_keeps_older_versions_listed() {
    let mut h = Harness::new();
    let mut a = h.group("replica-2", 1);
    let mut b = h.group("replica-1", 1);
    h.publish_group(&mut a, 12, &manifest(1, 4));
    h.publish_group(&mut b, 13, &manifest(2, 4));
    assert_eq!(
        h.list(),
        vec![(12, vec!["replica-2".to_string()]), (13, vec!["replica-1".to_string()])]
    );
}

#[test]
fn publish_waits_for_every_shard() {
    let mut h = Harness::new();
    let mut g = h.group("trainer-0", 2);
    let m = manifest(1, 4);
    let first = h.publish(&mut g[0], 1, &m);
    assert!(h.take_reply(first).is_none());
    assert!(h.list().is_empty());
    let second = h.publish(&mut g[1], 1, &m);
    assert_eq!(h.reply(first), Reply::Ack);
    assert_eq!(h.reply(second), Reply::Ack);
    assert_eq!(h.list(), vec![(1, vec!["trainer-0".to_string()])]);
}

#[test]
fn conflicting_manifests_and_version_rules() {
    let mut h = Harness::new();
    let mut a = h.group("trainer-0", 1);
    let mut b = h.group("trainer-1", 1);
    h.publish_group(&mut a, 5, &manifest(1, 4));
    let id = h.publish(&mut b[0], 5, &manifest(9, 4));
    assert_eq!(error_code(h.reply(id)), ErrorCode::ManifestConflict);

    let id = h.publish(&mut a[0], 6, &manifest(1, 4));
    assert_eq!(error_code(h.reply(id)), ErrorCode::InvalidState, "double publish");

    let id = h.unpublish(&mut a[0]);
    assert_eq!(h.reply(id), Reply::Ack);
    let id = h.publish(&mut a[0], 4, &manifest(3, 4));
    assert_eq!(error_code(h.reply(id)), ErrorCode::InvalidVersion);
}

#[test]
fn unpublish_with_second_copy_is_immediate() {
    let mut h = Harness::new();
    let m = manifest(1, 4);
    let mut a = h.group("trainer-0", 1);
    let mut b = h.group("trainer-1", 1);
    h.publish_group(&mut a, 3, &m);
    h.publish_group(&mut b, 3, &m);
    let id = h.unpublish(&mut a[0]);
    assert_eq!(h.reply(id), Reply::Ack);
    assert_eq!(h.list(), vec![(3, vec!["trainer-1".to_string()])]);
}

#[test]
fn unpublish_drains_in_flight_transfer() {
    let mut h = Harness::new();
    let m = manifest(1, 4);
    let mut t = h.group("trainer-0", 1);
    let mut r = h.group("rollout-0", 1);
    h.publish_group(&mut t, 1, &m);
    let id = h.replicate(&mut r[0], latest());
    let a = assignment(h.reply(id));
    assert_eq!(a.source_replica, "trainer-0");

    let un = h.unpublish(&mut t[0]);
    assert!(h.take_reply(un).is_none(), "ack must wait for the drain");
    // The draining replica is no longer visible or assignable.
    assert_eq!(h.list(), vec![]);
    assert_eq!(h.complete(&r[0]), Reply::Ack);
    assert_eq!(h.reply(un), Reply::Ack);
    assert_eq!(h.list(), vec![(1, vec!["rollout-0".to_string()])]);
}

#[test]
fn last_retained_copy_is_offloaded_once() {
    let mut h = Harness::new();
    let m = manifest(1, 4);
    let _rollout = h.open_in("rollout-0", 2, 0, "dc1", false, RetentionRule::latest());
    let mut t0 = h.group("trainer-0", 2);
    let mut t1 = h.group("trainer-1", 2);
    h.publish_group(&mut t0, 1, &m);
    h.publish_group(&mut t1, 1, &m);

    let ids: Vec<u64> = t0.iter_mut().chain(t1.iter_mut()).map(|s| h.unpublish(s)).collect();
    let replies: Vec<Reply> = ids.iter().map(|id| h.reply(*id)).collect();
    let offloads = replies
        .iter()
        .filter(|r| matches!(r, Reply::Directive(Directive::OffloadFirst { .. })))
        .count();
    assert_eq!(offloads, 2, "both shards of exactly one replica offload: {replies:?}");
    assert_eq!(replies.iter().filter(|r| **r == Reply::Ack).count(), 2);

    let (offloader, _) = if matches!(replies[0], Reply::Directive(_)) { (&t0, &t1) } else { (&t1, &t0) };
    let confirms: Vec<u64> = offloader
        .iter()
        .map(|s| h.send(s.client, Request::OffloadConfirm { token: s.token, ok: true, op_seq: s.op }))
        .collect();
    for id in confirms {
        assert_eq!(h.reply(id), Reply::Ack);
    }
    let name = format!("{}+offload", offloader[0].replica);
    assert_eq!(h.list(), vec![(1, vec![name.clone()])]);
    let view = h.server.replica(MODEL, &name).unwrap();
    assert!(matches!(view.kind, ReplicaKind::Offload { .. }));
    assert!(!view.spot);
}

#[test]
fn pipeline_chains_simultaneous_requesters() {
    let mut h = Harness::new();
    let m = manifest(1, 4);
    let mut t = h.group("trainer-0", 1);
    h.publish_group(&mut t, 1, &m);
    let mut a = h.group("rollout-a", 1);
    let mut b = h.group("rollout-b", 1);
    let ia = h.replicate(&mut a[0], latest());
    let ib = h.replicate(&mut b[0], latest());
    let aa = assignment(h.reply(ia));
    let ab = assignment(h.reply(ib));
    assert_eq!(aa.source_replica, "trainer-0");
    assert!(aa.source_complete);
    assert_eq!(ab.source_replica, "rollout-a");
    assert!(!ab.source_complete);
}

#[test]
fn pipeline_off_fans_in_on_the_source() {
    let mut h = Harness::with(ServerConfig {
        pipeline: false,
        ..config()
    });
    let m = manifest(1, 4);
    let mut t = h.group("trainer-0", 1);
    h.publish_group(&mut t, 1, &m);
    for name in ["r1", "r2", "r3"] {
        let mut g = h.group(name, 1);
        let id = h.replicate(&mut g[0], latest());
        assert_eq!(assignment(h.reply(id)).source_replica, "trainer-0");
    }
    assert_eq!(h.server.replica(MODEL, "trainer-0").unwrap().serving_count, 3);
}

#[test]
fn cross_dc_requester_becomes_seeding() {
    let mut h = Harness::new();
    let m = manifest(1, 4);
    let mut t = h.group("trainer-0", 1);
    h.publish_group(&mut t, 1, &m);
    let mut r = [h.open_in("rollout-0", 1, 0, "dc2", false, RetentionRule::none())];
    let id = h.replicate(&mut r[0], latest());
    let a = assignment(h.reply(id));
    assert!(a.cross_dc);
    assert!(h.server.replica(MODEL, "rollout-0").unwrap().seeding);
    h.complete(&r[0]);
    assert!(!h.server.replica(MODEL, "rollout-0").unwrap().seeding);
}

#[test]
fn absolute_replicate_blocks_until_published() {
    let mut h = Harness::new();
    let mut t = h.group("trainer-0", 1);
    h.publish_group(&mut t, 3, &manifest(1, 4));
    let mut r = h.group("rollout-0", 1);
    let id = h.replicate(&mut r[0], VersionSpec::absolute(7));
    assert!(h.take_reply(id).is_none());
    let un = h.unpublish(&mut t[0]);
    assert_eq!(h.reply(un), Reply::Ack);
    h.publish_group(&mut t, 7, &manifest(2, 4));
    assert_eq!(assignment(h.reply(id)).version, VersionId(7));
}

#[test]
fn update_decisions() {
    let mut h = Harness::new();
    let mut t12 = h.group("trainer-a", 1);
    h.publish_group(&mut t12, 12, &manifest(1, 4));
    let mut r = h.group("rollout-0", 1);
    let id = h.replicate(&mut r[0], latest());
    assert_eq!(assignment(h.reply(id)).version, VersionId(12));
    h.complete(&r[0]);

    let mut t13 = h.group("trainer-b", 1);
    h.publish_group(&mut t13, 13, &manifest(2, 4));
    let id = h.update(&mut r[0], latest(), Some(12), false);
    let a = assignment(h.reply(id));
    assert_eq!(a.version, VersionId(13));
    h.complete(&r[0]);

    let id = h.update(&mut r[0], latest(), Some(13), false);
    assert_eq!(h.reply(id), Reply::Decision(UpdateDecision::NoChange));
}

#[test]
fn smart_skipping_hides_seeding_versions() {
    let mut h = Harness::new();
    let mut t = h.group("trainer-0", 1);
    h.publish_group(&mut t, 13, &manifest(1, 4));
    let mut seeder = [h.open_in("rollout-a", 1, 0, "dc2", false, RetentionRule::none())];
    let mut other = [h.open_in("rollout-b", 1, 0, "dc2", false, RetentionRule::none())];
    // rollout-b holds 13 already in dc2, rollout-a seeds 14 later.
    let id = h.replicate(&mut other[0], latest());
    assert!(assignment(h.reply(id)).cross_dc);
    h.complete(&other[0]);
    let id = h.replicate(&mut seeder[0], latest());
    assert_eq!(assignment(h.reply(id)).source_replica, "rollout-b");
    h.complete(&seeder[0]);

    let un = h.unpublish(&mut t[0]);
    assert_eq!(h.reply(un), Reply::Ack);
    h.publish_group(&mut t, 14, &manifest(2, 4));
    let id = h.update(&mut seeder[0], latest(), Some(13), false);
    let a = assignment(h.reply(id));
    assert!(a.cross_dc);

    let id = h.update(&mut other[0], latest(), Some(13), false);
    assert_eq!(h.reply(id), Reply::Decision(UpdateDecision::NoChange));
    h.complete(&seeder[0]);
    let id = h.update(&mut other[0], latest(), Some(13), false);
    let a = assignment(h.reply(id));
    assert_eq!((a.version, a.source_replica.as_str(), a.cross_dc), (VersionId(14), "rollout-a", false));
}

#[test]
fn progress_rules() {
    let mut h = Harness::new();
    let mut t = h.group("trainer-0", 1);
    h.publish_group(&mut t, 1, &manifest(1, 4));
    let mut r = h.group("rollout-0", 1);
    let id = h.replicate(&mut r[0], latest());
    h.reply(id);
    let s = r[0].clone();
    for (p, ok) in [(2, true), (2, true), (1, false), (4, true)] {
        let id = h.send(s.client, Request::Progress { token: s.token, progress: p });
        match h.reply(id) {
            Reply::Ack => assert!(ok),
            other => {
                assert!(!ok);
                assert_eq!(error_code(other), ErrorCode::ProtocolViolation);
            }
        }
    }
    h.complete(&s);
    // The completed replica is now a source in its own right.
    let mut x = h.group("rollout-1", 1);
    let mut y = h.group("rollout-2", 1);
    let ix = h.replicate(&mut x[0], latest());
    let iy = h.replicate(&mut y[0], latest());
    let sources = [assignment(h.reply(ix)).source_replica, assignment(h.reply(iy)).source_replica];
    assert!(sources.contains(&"rollout-0".to_string()));
}

#[test]
fn listing_follows_fig5_state() {
    let mut h = Harness::new();
    assert!(h.list().is_empty());
    let mut r1 = h.group("rollout-1", 1);
    h.publish_group(&mut r1, 2, &manifest(1, 4));
    let mut t = h.group("trainer-0", 1);
    h.publish_group(&mut t, 3, &manifest(2, 4));
    let mut r2 = h.group("rollout-2", 1);
    let id = h.replicate(&mut r2[0], VersionSpec::absolute(3));
    h.reply(id);
    assert_eq!(
        h.list(),
        vec![(2, vec!["rollout-1".to_string()]), (3, vec!["trainer-0".to_string()])]
    );
    h.complete(&r2[0]);
    assert_eq!(
        h.list(),
        vec![
            (2, vec!["rollout-1".to_string()]),
            (3, vec!["rollout-2".to_string(), "trainer-0".to_string()])
        ]
    );
    assert!(h.server.list("unknown-model").is_empty());
}

#[test]
fn source_failure_reassigns_to_trainer() {
    let mut h = Harness::new();
    let m = manifest(1, 4);
    let mut t = h.group("trainer-0", 1);
    h.publish_group(&mut t, 1, &m);
    let mut a = h.group("rollout-a", 1);
    let id = h.replicate(&mut a[0], latest());
    h.reply(id);
    h.complete(&a[0]);
    let mut b = h.group("rollout-b", 1);
    let mut c = h.group("rollout-c", 1);
    let ib = h.replicate(&mut b[0], latest());
    let ic = h.replicate(&mut c[0], latest());
    let sb = assignment(h.reply(ib)).source_replica;
    let sc = assignment(h.reply(ic)).source_replica;
    assert_ne!(sb, sc, "least-loaded spreads the two requesters");
    let (victim, reader) = if sb == "rollout-a" { (&b, &c) } else { (&c, &b) };
    let _ = reader;

    let s = victim[0].clone();
    let id = h.send(
        s.client,
        Request::FailureReport {
            token: s.token,
            failed_replica: "rollout-a".into(),
            kind: FailureKind::Unreachable,
            op_seq: s.op,
        },
    );
    let a2 = assignment(h.reply(id));
    assert_eq!(a2.source_replica, "trainer-0");
    assert_eq!(h.server.replica(MODEL, "rollout-a").unwrap().lifecycle, Lifecycle::Failed);
    assert_eq!(h.complete(&s), Reply::Ack);

    // A report about a source after finishing is a no-op.
    let id = h.send(
        s.client,
        Request::FailureReport {
            token: s.token,
            failed_replica: "trainer-0".into(),
            kind: FailureKind::Unreachable,
            op_seq: s.op,
        },
    );
    assert_eq!(h.reply(id), Reply::Ack);
    assert_eq!(h.server.replica(MODEL, "trainer-0").unwrap().lifecycle, Lifecycle::Published);
}

#[test]
fn losing_the_last_copy_makes_the_version_unavailable() {
    let mut h = Harness::new();
    let mut t = h.group("trainer-0", 1);
    h.publish_group(&mut t, 1, &manifest(1, 4));
    let mut r = h.group("rollout-0", 1);
    let id = h.replicate(&mut r[0], latest());
    h.reply(id);
    let s = r[0].clone();
    let id = h.send(
        s.client,
        Request::FailureReport {
            token: s.token,
            failed_replica: "trainer-0".into(),
            kind: FailureKind::Unreachable,
            op_seq: s.op,
        },
    );
    assert_eq!(error_code(h.reply(id)), ErrorCode::VersionUnavailable);

    let id = h.replicate(&mut r[0], VersionSpec::absolute(1));
    assert_eq!(error_code(h.reply(id)), ErrorCode::VersionUnavailable);

    let mut t2 = h.group("trainer-1", 1);
    h.publish_group(&mut t2, 2, &manifest(2, 4));
    let id = h.replicate(&mut r[0], latest());
    assert_eq!(assignment(h.reply(id)).version, VersionId(2));
}

#[test]
fn corrupt_source_is_avoided_but_reused_when_alone() {
    let mut h = Harness::new();
    let mut t = h.group("trainer-0", 1);
    h.publish_group(&mut t, 1, &manifest(1, 4));
    let mut r = h.group("rollout-0", 1);
    let id = h.replicate(&mut r[0], latest());
    h.reply(id);
    let s = r[0].clone();
    let id = h.send(
        s.client,
        Request::FailureReport {
            token: s.token,
            failed_replica: "trainer-0".into(),
            kind: FailureKind::Corrupt,
            op_seq: s.op,
        },
    );
    assert_eq!(assignment(h.reply(id)).source_replica, "trainer-0");
    assert_eq!(h.server.replica(MODEL, "trainer-0").unwrap().lifecycle, Lifecycle::Published);
}

#[test]
fn one_silent_shard_evicts_the_whole_replica() {
    let mut h = Harness::new();
    let mut t = h.group("trainer-0", 8);
    h.publish_group(&mut t, 1, &manifest(1, 4));
    for _ in 0..6 {
        h.advance(Duration::from_secs(1));
        for s in &t[1..] {
            h.heartbeat(s);
        }
    }
    assert!(h.list().is_empty());
    let v = h.server.replica(MODEL, "trainer-0").unwrap();
    assert_eq!(v.lifecycle, Lifecycle::Failed);
    assert_eq!(h.server.open_handles(), 7);
}

#[test]
fn heartbeats_renew_leases() {
    let mut h = Harness::new();
    let mut t = h.group("trainer-0", 1);
    h.publish_group(&mut t, 1, &manifest(1, 4));
    for _ in 0..20 {
        h.advance(Duration::from_secs(1));
        h.heartbeat(&t[0]);
    }
    assert_eq!(h.list().len(), 1);
}

#[test]
fn failed_requester_releases_its_source() {
    let mut h = Harness::new();
    let mut t = h.group("trainer-0", 1);
    h.publish_group(&mut t, 1, &manifest(1, 4));
    let mut r = h.group("rollout-0", 1);
    let id = h.replicate(&mut r[0], latest());
    h.reply(id);
    assert_eq!(h.server.replica(MODEL, "trainer-0").unwrap().serving_count, 1);
    let un = h.unpublish(&mut t[0]);
    for _ in 0..6 {
        h.advance(Duration::from_secs(1));
        h.heartbeat(&t[0]);
    }
    assert!(h.server.replica(MODEL, "rollout-0").is_none(), "single-shard replica removed with its handle");
    assert_eq!(h.server.replica(MODEL, "trainer-0").unwrap().serving_count, 0);
    assert_eq!(h.reply(un), Reply::Ack, "drain completes once the reader is gone");
}

#[test]
fn unfinished_group_transaction_times_out() {
    let mut h = Harness::new();
    let mut t = h.group("trainer-0", 2);
    let id = h.publish(&mut t[0], 1, &manifest(1, 4));
    for _ in 0..61 {
        h.advance(Duration::from_secs(1));
        h.heartbeat(&t[0]);
        h.heartbeat(&t[1]);
    }
    assert_eq!(error_code(h.reply(id)), ErrorCode::GroupAborted);
    let late = h.publish(&mut t[1], 1, &manifest(1, 4));
    assert_eq!(error_code(h.reply(late)), ErrorCode::GroupAborted);
    assert!(h.list().is_empty());
}

#[test]
fn group_both_shards_see_version_12() {
    let mut h = Harness::new();
    let m12 = manifest(1, 4);
    let m13 = manifest(2, 4);
    let mut r2 = h.group("replica-2", 2);
    h.publish_group(&mut r2, 12, &m12);
    let mut r0 = h.group("replica-0", 2);
    let mut r1 = h.group("replica-1", 2);

    let first = h.replicate(&mut r0[0], latest());
    let p0 = h.publish(&mut r1[0], 13, &m13);
    let p1 = h.publish(&mut r1[1], 13, &m13);
    assert_eq!(h.reply(p0), Reply::Ack);
    assert_eq!(h.reply(p1), Reply::Ack);
    let second = h.replicate(&mut r0[1], latest());
    assert_eq!(assignment(h.reply(first)).version, VersionId(12));
    assert_eq!(assignment(h.reply(second)).version, VersionId(12));
}
