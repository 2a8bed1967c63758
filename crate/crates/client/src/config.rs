use std::sync::Arc;
use std::time::Duration;

use ros_transfer::{
    Endpoint, MemNetwork, MemTransport, PeerService, StageMode, StreamServer, StreamTransport, Transport, TransportKind,
    DEFAULT_PULL_TIMEOUT,
};

use crate::ClientError;

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// Reference servers in failover order.
    pub servers: Vec<String>,
    pub datacenter: String,
    pub spot: bool,
    pub heartbeat_interval: Duration,
    /// Polling interval of `wait`, and of progress reports while pulling.
    pub wait_interval: Duration,
    /// Corrupt deliveries tolerated per fill before giving up.
    pub checksum_retries: u32,
    /// Ask for a background seeding buffer when an update would pull
    /// across datacenters.
    pub offload_seeding: bool,
    /// Digest regions at publish and again at unpublish, and fail the
    /// unpublish if the host changed published bytes.
    pub check_contract: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            servers: vec!["127.0.0.1:7070".into()],
            datacenter: "dc0".into(),
            spot: false,
            heartbeat_interval: Duration::from_secs(1),
            wait_interval: Duration::from_millis(100),
            checksum_retries: 3,
            offload_seeding: false,
            check_contract: false,
        }
    }
}

impl ClientConfig {
    pub fn new(servers: impl IntoIterator<Item = impl Into<String>>) -> Self {
        ClientConfig {
            servers: servers.into_iter().map(Into::into).collect(),
            ..ClientConfig::default()
        }
    }

    /// Defaults overridden by `ROS_SERVERS` (comma separated), `ROS_DC` and
    /// `ROS_SPOT`.
    pub fn from_env() -> Result<Self, ClientError> {
        Self::from_vars(|k| std::env::var(k).ok())
    }

    pub fn from_vars(get: impl Fn(&str) -> Option<String>) -> Result<Self, ClientError> {
        let mut cfg = ClientConfig::default();
        if let Some(s) = get("ROS_SERVERS") {
            cfg.servers = s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        }
        if let Some(dc) = get("ROS_DC") {
            cfg.datacenter = dc;
        }
        if let Some(spot) = get("ROS_SPOT") {
            cfg.spot = match spot.to_ascii_lowercase().as_str() {
                "1" | "true" | "yes" => true,
                "0" | "false" | "no" | "" => false,
                other => return Err(ClientError::InvalidArgument(format!("ROS_SPOT={other}"))),
            };
        }
        Ok(cfg)
    }
}

/// The bulk-data side shared by every handle in one process: the service
/// peers read from and the transport this process reads with.
#[derive(Clone)]
pub struct DataPlane {
    service: Arc<PeerService>,
    transport: Arc<dyn Transport>,
    kind: TransportKind,
    host: String,
    server: Option<Arc<StreamServer>>,
}

impl DataPlane {
    /// In-process peers on `net`, reachable as `mem://host/...`.
    pub fn mem(net: &MemNetwork, host: impl Into<String>) -> Self {
        let host = host.into();
        let service = PeerService::new();
        net.register(host.clone(), service.clone());
        DataPlane {
            service,
            transport: Arc::new(MemTransport::new(net.clone())),
            kind: TransportKind::Mem,
            host,
            server: None,
        }
    }

    /// Serves this process's stores over TCP on `bind`.
    pub fn stream(bind: &str, mode: StageMode) -> Result<Self, ClientError> {
        Self::stream_with_timeout(bind, mode, DEFAULT_PULL_TIMEOUT)
    }

    pub fn stream_with_timeout(bind: &str, mode: StageMode, pull_timeout: Duration) -> Result<Self, ClientError> {
        let service = PeerService::new();
        let server = StreamServer::spawn(bind, service.clone(), mode, 256)
            .map_err(|e| ClientError::InvalidArgument(format!("cannot serve on {bind}: {e}")))?;
        Ok(DataPlane {
            service,
            transport: Arc::new(StreamTransport::with_timeout(pull_timeout)),
            kind: TransportKind::Tcp,
            host: server.local_addr().to_string(),
            server: Some(Arc::new(server)),
        })
    }

    pub fn service(&self) -> &Arc<PeerService> {
        &self.service
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    pub fn endpoint(&self, key: &str) -> Endpoint {
        Endpoint::new(self.kind, self.host.clone(), key)
    }

    /// Closes every open peer connection, as if the process had crashed.
    pub fn sever(&self) {
        if let Some(s) = &self.server {
            s.sever();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn environment_overrides() {
        let vars = |k: &str| match k {
            "ROS_SERVERS" => Some("a:1, b:2".to_string()),
            "ROS_DC" => Some("east".to_string()),
            "ROS_SPOT" => Some("true".to_string()),
            _ => None,
        };
        let cfg = ClientConfig::from_vars(vars).unwrap();
        assert_eq!(cfg.servers, ["a:1", "b:2"]);
        assert_eq!(cfg.datacenter, "east");
        assert!(cfg.spot);
        assert!(ClientConfig::from_vars(|k| (k == "ROS_SPOT").then(|| "maybe".into())).is_err());
    }
}
