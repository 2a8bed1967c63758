use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use ros_core::VersionId;

use crate::wire::{self, Message};
use crate::{
    Endpoint, PeerService, PullRequest, PullStatus, StagingPool, Transport, TransferError, TransportKind,
    UnitSink, DEFAULT_PULL_TIMEOUT, STAGING_REGION,
};

/// How a streamed source gets bytes onto the socket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageMode {
    /// Write straight from the registered regions.
    Direct,
    /// Copy each unit into pre-allocated staging regions first.
    Staged,
}

/// Serves a [`PeerService`] over TCP, one thread per connection.
pub struct StreamServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl StreamServer {
    pub fn spawn(bind: &str, service: Arc<PeerService>, mode: StageMode, max_connections: usize) -> io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns = Arc::new(Mutex::new(Vec::new()));
        let live = Arc::new(AtomicUsize::new(0));
        let (stop2, conns2) = (stop.clone(), conns.clone());
        let acceptor = thread::Builder::new().name("ros-peer-accept".into()).spawn(move || {
            while !stop2.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        if live.load(Ordering::SeqCst) >= max_connections {
                            let _ = stream.shutdown(Shutdown::Both);
                            continue;
                        }
                        if let Ok(clone) = stream.try_clone() {
                            conns2.lock().unwrap_or_else(|e| e.into_inner()).push(clone);
                        }
                        let svc = service.clone();
                        let live = live.clone();
                        live.fetch_add(1, Ordering::SeqCst);
                        let spawned = thread::Builder::new().name("ros-peer-conn".into()).spawn(move || {
                            if let Err(e) = serve_connection(stream, &svc, mode) {
                                tracing::debug!(error = %e, "peer connection ended");
                            }
                            live.fetch_sub(1, Ordering::SeqCst);
                        });
                        if spawned.is_err() {
                            tracing::warn!("could not spawn a peer connection thread");
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                    Err(e) => {
                        tracing::warn!(error = %e, "peer accept failed");
                        thread::sleep(Duration::from_millis(10));
                    }
                }
            }
        })?;
        Ok(StreamServer {
            addr,
            stop,
            conns,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Endpoint for the store attached under `key`.
    pub fn endpoint(&self, key: &str) -> Endpoint {
        Endpoint::new(TransportKind::Tcp, self.addr.to_string(), key)
    }

    /// Drops every open connection, as a crashed process would.
    pub fn sever(&self) {
        for c in self.conns.lock().unwrap_or_else(|e| e.into_inner()).drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.sever();
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StreamServer {
    fn drop(&mut self) {
        self.stop_now();
    }
}

fn serve_connection(stream: TcpStream, svc: &PeerService, mode: StageMode) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut r = BufReader::new(stream.try_clone()?);
    let mut w = BufWriter::with_capacity(1 << 20, stream);
    let mut pool = (mode == StageMode::Staged).then(|| StagingPool::new(STAGING_REGION));
    loop {
        let msg = match Message::read_from(&mut r) {
            Ok(m) => m,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        if svc.faults().is_down() {
            return Ok(());
        }
        match msg {
            Message::ProgressQuery { key, version, shard } => {
                let reply = match svc.progress(&key, VersionId(version), shard) {
                    Ok(n) => Message::Progress { entries: n as u32 },
                    Err(e) => error_message(&e),
                };
                reply.write_to(&mut w)?;
            }
            Message::Pull {
                key,
                version,
                shard,
                lo,
                hi,
            } => {
                let req = PullRequest {
                    version: VersionId(version),
                    shard_idx: shard,
                    entries: lo as usize..hi as usize,
                };
                let mut io_err = None;
                let out = svc.pull(&key, &req, pool.as_mut(), &mut |entries, pieces| {
                    wire::write_data(&mut w, entries.start as u32, entries.end as u32, pieces).map_err(|e| {
                        let msg = e.to_string();
                        io_err = Some(e);
                        TransferError::Unreachable(msg)
                    })
                });
                if let Some(e) = io_err {
                    return Err(e);
                }
                let reply = match out {
                    Ok(PullStatus::Done) => Message::End {
                        status: wire::END_DONE,
                        progress: hi,
                    },
                    Ok(PullStatus::RetryAfterProgress { progress }) => Message::End {
                        status: wire::END_RETRY,
                        progress: progress as u32,
                    },
                    Err(TransferError::Unreachable(_)) => return Ok(()),
                    Err(e) => error_message(&e),
                };
                reply.write_to(&mut w)?;
            }
            other => {
                error_message(&TransferError::Protocol(format!("unexpected message kind {}", other.kind())))
                    .write_to(&mut w)?;
            }
        }
        w.flush()?;
    }
}

fn error_message(e: &TransferError) -> Message {
    match e {
        TransferError::NotServing => Message::Error {
            code: wire::ERR_NOT_SERVING,
            message: e.to_string(),
        },
        other => Message::Error {
            code: wire::ERR_PROTOCOL,
            message: other.to_string(),
        },
    }
}

/// Pulls over TCP, one connection per call.
#[derive(Debug, Clone)]
pub struct StreamTransport {
    timeout: Duration,
}

impl Default for StreamTransport {
    fn default() -> Self {
        StreamTransport {
            timeout: DEFAULT_PULL_TIMEOUT,
        }
    }
}

impl StreamTransport {
    pub fn with_timeout(timeout: Duration) -> Self {
        StreamTransport { timeout }
    }

    fn connect(&self, ep: &Endpoint) -> Result<TcpStream, TransferError> {
        if ep.kind != TransportKind::Tcp {
            return Err(TransferError::BadEndpoint(ep.to_string()));
        }
        let addr = ep
            .host
            .to_socket_addrs()
            .map_err(|_| TransferError::BadEndpoint(ep.to_string()))?
            .next()
            .ok_or_else(|| TransferError::BadEndpoint(ep.to_string()))?;
        let s = TcpStream::connect_timeout(&addr, self.timeout).map_err(io_error)?;
        s.set_read_timeout(Some(self.timeout)).map_err(io_error)?;
        s.set_write_timeout(Some(self.timeout)).map_err(io_error)?;
        s.set_nodelay(true).map_err(io_error)?;
        Ok(s)
    }
}

fn io_error(e: io::Error) -> TransferError {
    match e.kind() {
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => TransferError::Timeout,
        io::ErrorKind::InvalidData => TransferError::Protocol(e.to_string()),
        _ => TransferError::Unreachable(e.to_string()),
    }
}

fn remote_error(code: u8, message: String) -> TransferError {
    if code == wire::ERR_NOT_SERVING {
        TransferError::NotServing
    } else {
        TransferError::Protocol(message)
    }
}

impl Transport for StreamTransport {
    fn query_progress(&self, ep: &Endpoint, version: VersionId, shard_idx: u32) -> Result<usize, TransferError> {
        let mut s = self.connect(ep)?;
        Message::ProgressQuery {
            key: ep.key.clone(),
            version: version.0,
            shard: shard_idx,
        }
        .write_to(&mut s)
        .map_err(io_error)?;
        match Message::read_from(&mut s).map_err(io_error)? {
            Message::Progress { entries } => Ok(entries as usize),
            Message::Error { code, message } => Err(remote_error(code, message)),
            other => Err(TransferError::Protocol(format!("unexpected reply kind {}", other.kind()))),
        }
    }

    fn pull(
        &self,
        ep: &Endpoint,
        req: &PullRequest,
        sink: &mut UnitSink<'_>,
    ) -> Result<PullStatus, TransferError> {
        let s = self.connect(ep)?;
        let mut w = s.try_clone().map_err(io_error)?;
        Message::Pull {
            key: ep.key.clone(),
            version: req.version.0,
            shard: req.shard_idx,
            lo: req.entries.start as u32,
            hi: req.entries.end as u32,
        }
        .write_to(&mut w)
        .map_err(io_error)?;
        let mut r = BufReader::with_capacity(1 << 20, s);
        loop {
            match Message::read_from(&mut r).map_err(io_error)? {
                Message::Data { lo, hi, bytes } => sink(lo as usize..hi as usize, &bytes)?,
                Message::End { status, progress } => {
                    return Ok(if status == wire::END_DONE {
                        PullStatus::Done
                    } else {
                        PullStatus::RetryAfterProgress {
                            progress: progress as usize,
                        }
                    })
                }
                Message::Error { code, message } => return Err(remote_error(code, message)),
                other => return Err(TransferError::Protocol(format!("unexpected reply kind {}", other.kind()))),
            }
        }
    }
}
