//! One TCP connection to a reference server.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use ros_core::{Directive, Frame, Reply, Request, Token};

use crate::ClientError;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

type Pending = Arc<Mutex<HashMap<u64, Sender<Reply>>>>;

/// Multiplexes concurrent calls over one socket. A reader thread routes
/// replies by request id and forwards server pushes to a channel.
pub struct Connection {
    addr: String,
    writer: Mutex<BufWriter<TcpStream>>,
    stream: TcpStream,
    pending: Pending,
    next_id: AtomicU64,
    alive: Arc<AtomicBool>,
}

impl Connection {
    pub fn connect(addr: &str) -> Result<(Connection, Receiver<(Token, Directive)>), ClientError> {
        let unavailable = |e: std::io::Error| ClientError::Unavailable(format!("{addr}: {e}"));
        let sock = addr
            .to_socket_addrs()
            .map_err(unavailable)?
            .next()
            .ok_or_else(|| ClientError::Unavailable(format!("{addr}: no address")))?;
        let stream = TcpStream::connect_timeout(&sock, CONNECT_TIMEOUT).map_err(unavailable)?;
        stream.set_nodelay(true).map_err(unavailable)?;
        let reader = stream.try_clone().map_err(unavailable)?;
        let writer = stream.try_clone().map_err(unavailable)?;
        let pending: Pending = Arc::default();
        let alive = Arc::new(AtomicBool::new(true));
        let (push_tx, push_rx) = mpsc::channel();
        {
            let pending = pending.clone();
            let alive = alive.clone();
            let addr = addr.to_string();
            thread::Builder::new()
                .name("ros-client-read".into())
                .spawn(move || read_loop(reader, pending, alive, push_tx, &addr))
                .map_err(unavailable)?;
        }
        Ok((
            Connection {
                addr: addr.to_string(),
                writer: Mutex::new(BufWriter::new(writer)),
                stream,
                pending,
                next_id: AtomicU64::new(1),
                alive,
            },
            push_rx,
        ))
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    /// Sends `req` and waits for its reply. Fails with `Unavailable` if the
    /// connection drops first.
    pub fn call(&self, req: Request, timeout: Option<Duration>) -> Result<Reply, ClientError> {
        let rx = self.send(req)?;
        let reply = match timeout {
            Some(t) => match rx.recv_timeout(t) {
                Ok(r) => Ok(r),
                Err(RecvTimeoutError::Timeout) => return Err(ClientError::Timeout),
                Err(RecvTimeoutError::Disconnected) => Err(()),
            },
            None => rx.recv().map_err(|_| ()),
        };
        reply.map_err(|_| ClientError::Unavailable(format!("{}: connection lost", self.addr)))
    }

    fn send(&self, request: Request) -> Result<Receiver<Reply>, ClientError> {
        let lost = || ClientError::Unavailable(format!("{}: connection lost", self.addr));
        if !self.is_alive() {
            return Err(lost());
        }
        let req_id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        self.pending.lock().unwrap_or_else(|e| e.into_inner()).insert(req_id, tx);
        if !self.is_alive() {
            self.pending.lock().unwrap_or_else(|e| e.into_inner()).remove(&req_id);
            return Err(lost());
        }
        let frame = Frame::Request { req_id, request };
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        if frame.write_to(&mut *w).is_err() {
            drop(w);
            self.pending.lock().unwrap_or_else(|e| e.into_inner()).remove(&req_id);
            self.close();
            return Err(lost());
        }
        Ok(rx)
    }

    pub fn close(&self) {
        self.alive.store(false, Ordering::SeqCst);
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        self.close();
    }
}

fn read_loop(stream: TcpStream, pending: Pending, alive: Arc<AtomicBool>, pushes: Sender<(Token, Directive)>, addr: &str) {
    let mut r = BufReader::new(stream);
    loop {
        match Frame::read_from(&mut r) {
            Ok(Frame::Reply { req_id, reply }) => {
                if let Some(tx) = pending.lock().unwrap_or_else(|e| e.into_inner()).remove(&req_id) {
                    let _ = tx.send(reply);
                }
            }
            Ok(Frame::Push { token, directive }) => {
                let _ = pushes.send((token, directive));
            }
            Ok(Frame::Request { .. }) => tracing::warn!(addr, "server sent a request frame"),
            Err(e) => {
                tracing::debug!(addr, error = %e, "server connection closed");
                break;
            }
        }
    }
    alive.store(false, Ordering::SeqCst);
    // Dropping the senders wakes every waiting caller.
    pending.lock().unwrap_or_else(|e| e.into_inner()).clear();
}
