//! TCP front end for [`ReferenceServer`].
//!
//! One thread owns the state machine and applies requests in arrival order;
//! each connection gets a reader thread feeding it and a writer thread
//! draining its outbound queue. Lease sweeps run on the state thread
//! between requests.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use ros_core::Frame;

use crate::config::Config;
use crate::machine::{ClientId, Outbound, ReferenceServer};

const SWEEP_EVERY: Duration = Duration::from_millis(100);

enum Msg {
    Connected(ClientId, TcpStream, Sender<Frame>),
    Frame(ClientId, Frame),
    Gone(ClientId),
}

/// A server running on background threads.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, drops every connection and waits for the threads.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Binds `config.listen` and serves until the handle is shut down.
pub fn spawn(config: &Config) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(&config.listen)?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();

    let server = ReferenceServer::new(config.server);
    let state_stop = stop.clone();
    let state = thread::Builder::new()
        .name("ros-state".into())
        .spawn(move || state_loop(server, rx, state_stop))?;

    let accept_stop = stop.clone();
    let acceptor = thread::Builder::new()
        .name("ros-accept".into())
        .spawn(move || accept_loop(listener, tx, accept_stop))?;

    tracing::info!(%addr, "reference server listening");
    Ok(ServerHandle {
        addr,
        stop,
        threads: vec![acceptor, state],
    })
}

fn accept_loop(listener: TcpListener, tx: Sender<Msg>, stop: Arc<AtomicBool>) {
    let mut next_client: ClientId = 1;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let client = next_client;
                next_client += 1;
                tracing::debug!(client, %peer, "connection accepted");
                if let Err(e) = start_connection(client, stream, tx.clone()) {
                    tracing::warn!(client, error = %e, "could not start connection");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

fn start_connection(client: ClientId, stream: TcpStream, tx: Sender<Msg>) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let reader = stream.try_clone()?;
    let writer = stream.try_clone()?;
    let (out_tx, out_rx) = mpsc::channel::<Frame>();
    if tx.send(Msg::Connected(client, stream, out_tx)).is_err() {
        return Ok(());
    }
    thread::Builder::new()
        .name(format!("ros-write-{client}"))
        .spawn(move || {
            let mut w = BufWriter::new(writer);
            for frame in out_rx {
                if frame.write_to(&mut w).is_err() {
                    break;
                }
            }
        })?;
    thread::Builder::new()
        .name(format!("ros-read-{client}"))
        .spawn(move || {
            let mut r = BufReader::new(reader);
            loop {
                match Frame::read_from(&mut r) {
                    Ok(frame) => {
                        if tx.send(Msg::Frame(client, frame)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        if e.kind() != io::ErrorKind::UnexpectedEof {
                            tracing::debug!(client, error = %e, "connection closed");
                        }
                        let _ = tx.send(Msg::Gone(client));
                        break;
                    }
                }
            }
        })?;
    Ok(())
}

fn state_loop(mut server: ReferenceServer, rx: Receiver<Msg>, stop: Arc<AtomicBool>) {
    let start = Instant::now();
    let mut conns: HashMap<ClientId, (TcpStream, Sender<Frame>)> = HashMap::new();
    let mut last_sweep = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        let msg = rx.recv_timeout(SWEEP_EVERY);
        let now = start.elapsed();
        let out = match msg {
            Ok(Msg::Connected(client, stream, tx)) => {
                conns.insert(client, (stream, tx));
                Vec::new()
            }
            Ok(Msg::Gone(client)) => {
                conns.remove(&client);
                Vec::new()
            }
            Ok(Msg::Frame(client, Frame::Request { req_id, request })) => {
                server.handle(now, client, req_id, request)
            }
            Ok(Msg::Frame(client, other)) => {
                tracing::warn!(client, ?other, "ignoring non-request frame");
                Vec::new()
            }
            Err(RecvTimeoutError::Timeout) => Vec::new(),
            Err(RecvTimeoutError::Disconnected) => break,
        };
        dispatch(&conns, out);
        if last_sweep.elapsed() >= SWEEP_EVERY {
            last_sweep = Instant::now();
            let out = server.sweep(start.elapsed());
            dispatch(&conns, out);
        }
        for e in server.drain_events() {
            tracing::info!(target: "ros::server", "{e}");
        }
    }
    for (stream, _) in conns.values() {
        let _ = stream.shutdown(Shutdown::Both);
    }
}

fn dispatch(conns: &HashMap<ClientId, (TcpStream, Sender<Frame>)>, out: Vec<Outbound>) {
    for o in out {
        let (client, frame) = match o {
            Outbound::Reply { client, req_id, reply } => (client, Frame::Reply { req_id, reply }),
            Outbound::Push {
                client,
                token,
                directive,
            } => (client, Frame::Push { token, directive }),
        };
        if let Some((_, tx)) = conns.get(&client) {
            let _ = tx.send(frame);
        }
    }
}
