use std::fmt;

use ros_core::{FailureKind, VersionId};

/// One server decision, in the order it was taken.
///
/// The `Display` form is the line format used by simulation traces, so it
/// must stay stable and free of anything nondeterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Opened {
        model: String,
        replica: String,
        shard: u32,
        token: u64,
    },
    Closed {
        replica: String,
        shard: u32,
    },
    TxnStarted {
        replica: String,
        op_seq: u64,
        kind: &'static str,
    },
    Resolved {
        replica: String,
        op_seq: u64,
        version: VersionId,
    },
    Blocked {
        replica: String,
        op_seq: u64,
    },
    Decided {
        replica: String,
        op_seq: u64,
        shard: u32,
        decision: String,
    },
    Assigned {
        requester: String,
        shard: u32,
        version: VersionId,
        source: String,
        /// Serving count of the chosen source when it was picked.
        source_count: usize,
        /// Every eligible candidate with its serving count at decision time.
        candidates: Vec<(String, usize)>,
        cross_dc: bool,
    },
    Published {
        replica: String,
        version: VersionId,
    },
    Revoked {
        replica: String,
        version: VersionId,
    },
    Drained {
        replica: String,
        version: VersionId,
    },
    Unpublished {
        replica: String,
        version: VersionId,
    },
    OffloadRequested {
        replica: String,
        version: VersionId,
    },
    OffloadCreated {
        replica: String,
        version: VersionId,
    },
    SeedCreated {
        replica: String,
        version: VersionId,
    },
    Released {
        replica: String,
        version: VersionId,
    },
    FailureReported {
        reporter: String,
        shard: u32,
        failed: String,
        kind: FailureKind,
    },
    ReplicaFailed {
        replica: String,
        reason: String,
    },
    FillVoided {
        replica: String,
        reason: String,
    },
    TxnAborted {
        replica: String,
        op_seq: u64,
        reason: String,
    },
    Rejected {
        replica: String,
        op: &'static str,
        error: String,
    },
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Opened {
                model,
                replica,
                shard,
                token,
            } => write!(f, "open {model}/{replica}/{shard} token={token}"),
            Event::Closed { replica, shard } => write!(f, "close {replica}/{shard}"),
            Event::TxnStarted { replica, op_seq, kind } => write!(f, "txn {replica} op={op_seq} {kind}"),
            Event::Resolved {
                replica,
                op_seq,
                version,
            } => write!(f, "resolve {replica} op={op_seq} v={version}"),
            Event::Blocked { replica, op_seq } => write!(f, "blocked {replica} op={op_seq}"),
            Event::Decided {
                replica,
                op_seq,
                shard,
                decision,
            } => write!(f, "decide {replica}/{shard} op={op_seq} {decision}"),
            Event::Assigned {
                requester,
                shard,
                version,
                source,
                source_count,
                candidates,
                cross_dc,
            } => {
                write!(
                    f,
                    "assign {requester}/{shard} v={version} from={source} load={source_count} cross_dc={cross_dc} candidates=["
                )?;
                for (i, (name, n)) in candidates.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{name}:{n}")?;
                }
                f.write_str("]")
            }
            Event::Published { replica, version } => write!(f, "published {replica} v={version}"),
            Event::Revoked { replica, version } => write!(f, "revoked {replica} v={version}"),
            Event::Drained { replica, version } => write!(f, "drained {replica} v={version}"),
            Event::Unpublished { replica, version } => write!(f, "unpublished {replica} v={version}"),
            Event::OffloadRequested { replica, version } => write!(f, "offload-first {replica} v={version}"),
            Event::OffloadCreated { replica, version } => write!(f, "offload-created {replica} v={version}"),
            Event::SeedCreated { replica, version } => write!(f, "seed-created {replica} v={version}"),
            Event::Released { replica, version } => write!(f, "released {replica} v={version}"),
            Event::FailureReported {
                reporter,
                shard,
                failed,
                kind,
            } => write!(f, "failure-report {reporter}/{shard} source={failed} kind={kind:?}"),
            Event::ReplicaFailed { replica, reason } => write!(f, "replica-failed {replica} ({reason})"),
            Event::FillVoided { replica, reason } => write!(f, "fill-voided {replica} ({reason})"),
            Event::TxnAborted {
                replica,
                op_seq,
                reason,
            } => write!(f, "txn-aborted {replica} op={op_seq} ({reason})"),
            Event::Rejected { replica, op, error } => write!(f, "reject {replica} {op}: {error}"),
        }
    }
}
