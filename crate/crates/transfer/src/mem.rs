use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use ros_core::VersionId;

use crate::{Endpoint, PeerService, PullRequest, PullStatus, Transport, TransferError, TransportKind, UnitSink};

/// Registry of in-process peers, addressed by `mem://host/key`.
#[derive(Debug, Clone, Default)]
pub struct MemNetwork {
    hosts: Arc<RwLock<BTreeMap<String, Arc<PeerService>>>>,
}

impl MemNetwork {
    pub fn new() -> Self {
        MemNetwork::default()
    }

    pub fn register(&self, host: impl Into<String>, service: Arc<PeerService>) {
        self.hosts.write().unwrap_or_else(|e| e.into_inner()).insert(host.into(), service);
    }

    pub fn unregister(&self, host: &str) {
        self.hosts.write().unwrap_or_else(|e| e.into_inner()).remove(host);
    }

    fn lookup(&self, ep: &Endpoint) -> Result<Arc<PeerService>, TransferError> {
        if ep.kind != TransportKind::Mem {
            return Err(TransferError::BadEndpoint(ep.to_string()));
        }
        self.hosts
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(&ep.host)
            .cloned()
            .ok_or_else(|| TransferError::Unreachable(ep.host.clone()))
    }
}

/// Reads straight out of the source's registered regions.
#[derive(Debug, Clone, Default)]
pub struct MemTransport {
    net: MemNetwork,
}

impl MemTransport {
    pub fn new(net: MemNetwork) -> Self {
        MemTransport { net }
    }
}

impl Transport for MemTransport {
    fn query_progress(&self, ep: &Endpoint, version: VersionId, shard_idx: u32) -> Result<usize, TransferError> {
        self.net.lookup(ep)?.progress(&ep.key, version, shard_idx)
    }

    fn pull(
        &self,
        ep: &Endpoint,
        req: &PullRequest,
        sink: &mut UnitSink<'_>,
    ) -> Result<PullStatus, TransferError> {
        let svc = self.net.lookup(ep)?;
        svc.pull(&ep.key, req, None, &mut |entries, pieces| match pieces {
            [one] => sink(entries, one),
            many => sink(entries, &many.concat()),
        })
    }
}
