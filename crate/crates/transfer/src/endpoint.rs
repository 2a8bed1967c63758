use std::fmt;
use std::str::FromStr;

use crate::TransferError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransportKind {
    /// Peers in the same process; reads copy straight out of the source.
    Mem,
    /// Framed byte stream over TCP.
    Tcp,
    /// Virtual-time network driven by the simulator.
    Sim,
}

impl TransportKind {
    pub fn scheme(self) -> &'static str {
        match self {
            TransportKind::Mem => "mem",
            TransportKind::Tcp => "tcp",
            TransportKind::Sim => "sim",
        }
    }

    pub fn capabilities(self) -> Capabilities {
        Capabilities {
            progress_query: true,
            duplex: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub progress_query: bool,
    pub duplex: bool,
}

/// Where a shard's bytes can be read: `scheme://host/key`.
///
/// `host` names the serving process (a socket address for TCP) and `key`
/// selects one shard store inside it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub kind: TransportKind,
    pub host: String,
    pub key: String,
}

impl Endpoint {
    pub fn new(kind: TransportKind, host: impl Into<String>, key: impl Into<String>) -> Self {
        Endpoint {
            kind,
            host: host.into(),
            key: key.into(),
        }
    }

    pub fn capabilities(&self) -> Capabilities {
        self.kind.capabilities()
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}", self.kind.scheme(), self.host)?;
        if !self.key.is_empty() {
            write!(f, "/{}", self.key)?;
        }
        Ok(())
    }
}

impl FromStr for Endpoint {
    type Err = TransferError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TransferError::BadEndpoint(s.to_string());
        let (scheme, rest) = s.split_once("://").ok_or_else(bad)?;
        let kind = match scheme {
            "mem" => TransportKind::Mem,
            "tcp" => TransportKind::Tcp,
            "sim" => TransportKind::Sim,
            _ => return Err(bad()),
        };
        let (host, key) = rest.split_once('/').unwrap_or((rest, ""));
        if host.is_empty() {
            return Err(bad());
        }
        Ok(Endpoint::new(kind, host, key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for s in ["mem://node-1/actor/trainer-0/3", "tcp://127.0.0.1:9000/k", "sim://rollout-2"] {
            let ep: Endpoint = s.parse().unwrap();
            assert_eq!(ep.to_string(), s);
        }
        let ep: Endpoint = "tcp://10.0.0.1:80/a/b".parse().unwrap();
        assert_eq!((ep.host.as_str(), ep.key.as_str()), ("10.0.0.1:80", "a/b"));
    }

    #[test]
    fn rejects_junk() {
        for s in ["", "mem:/x", "udp://h/k", "tcp:///k"] {
            assert!(s.parse::<Endpoint>().is_err(), "{s}");
        }
    }
}
