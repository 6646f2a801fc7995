//! Frames over TCP: a thread-per-connection server and a pooled client.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::protocol::{
    decode_error, request_frame, response_frame, Request, Response, ERROR_TYPE, MAX_FRAME, PROTOCOL_VERSION,
    RESPONSE_BIT,
};
use super::Handler;
use crate::codec::Decoder;
use crate::error::{Error, Result};

/// Reads one frame. `Ok(None)` means the peer closed the stream between frames.
pub fn read_frame(stream: &mut impl Read) -> io::Result<Option<(u16, u64, Vec<u8>)>> {
    let mut len = [0u8; 4];
    match stream.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len);
    if !(10..=MAX_FRAME).contains(&len) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("bad frame length {len}"),
        ));
    }
    let mut buf = vec![0u8; len as usize];
    stream.read_exact(&mut buf)?;
    let msg_type = u16::from_le_bytes([buf[0], buf[1]]);
    let id = u64::from_le_bytes(buf[2..10].try_into().unwrap());
    buf.drain(..10);
    Ok(Some((msg_type, id, buf)))
}

/// A running server. Dropping it stops accepting and closes open connections.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, handler: Arc<dyn Handler>) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let accept = {
            let stop = stop.clone();
            let conns = conns.clone();
            std::thread::Builder::new()
                .name(format!("accept-{addr}"))
                .spawn(move || {
                    for stream in listener.incoming() {
                        if stop.load(Ordering::SeqCst) {
                            break;
                        }
                        let stream = match stream {
                            Ok(s) => s,
                            Err(e) => {
                                log::warn!("accept failed: {e}");
                                continue;
                            }
                        };
                        let _ = stream.set_nodelay(true);
                        if let Ok(c) = stream.try_clone() {
                            conns.lock().unwrap().push(c);
                        }
                        let handler = handler.clone();
                        std::thread::spawn(move || serve_connection(stream, handler));
                    }
                })?
        };
        Ok(Self {
            addr,
            stop,
            conns,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the server is shut down from another thread.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the accept loop.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for c in self.conns.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(mut stream: TcpStream, handler: Arc<dyn Handler>) {
    loop {
        let (msg_type, id, body) = match read_frame(&mut stream) {
            Ok(Some(f)) => f,
            Ok(None) => return,
            Err(e) => {
                log::debug!("connection closed: {e}");
                return;
            }
        };
        let resp = Request::decode_body(msg_type, &mut Decoder::new(&body)).and_then(|req| handler.handle(req));
        if let Err(e) = &resp {
            log::debug!("request {id} ({msg_type:#06x}) failed: {e}");
        }
        if stream.write_all(&response_frame(id, &resp)).is_err() {
            return;
        }
    }
}

/// Client side of a connection to a master or worker.
///
/// Connections are opened lazily and pooled. A request that fails on a
/// pooled connection is retried once on a fresh one, which covers peers that
/// restarted since the connection was made. Any other transport failure is
/// reported as [`Error::WorkerUnreachable`] for workers.
pub struct RemoteHandler {
    addr: String,
    shard: Option<u32>,
    pool: Mutex<Vec<TcpStream>>,
    next_id: AtomicU64,
    timeout: Duration,
}

impl RemoteHandler {
    pub fn worker(addr: impl Into<String>, shard: u32) -> Self {
        Self::new(addr.into(), Some(shard))
    }

    pub fn master(addr: impl Into<String>) -> Self {
        Self::new(addr.into(), None)
    }

    fn new(addr: String, shard: Option<u32>) -> Self {
        Self {
            addr,
            shard,
            pool: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
            timeout: Duration::from_secs(5),
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn unreachable(&self, reason: impl std::fmt::Display) -> Error {
        match self.shard {
            Some(shard) => Error::WorkerUnreachable {
                shard,
                reason: format!("{}: {reason}", self.addr),
            },
            None => Error::Io(format!("master {} unreachable: {reason}", self.addr)),
        }
    }

    fn connect(&self) -> Result<TcpStream> {
        let addrs: Vec<SocketAddr> = self.addr.to_socket_addrs().map_err(|e| self.unreachable(e))?.collect();
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, self.timeout) {
                Ok(mut s) => {
                    let _ = s.set_nodelay(true);
                    match self.exchange(
                        &mut s,
                        &Request::Ping {
                            version: PROTOCOL_VERSION,
                        },
                    ) {
                        Ok(Ok(Response::Pong { version, .. })) if version == PROTOCOL_VERSION => return Ok(s),
                        Ok(Ok(Response::Pong { version, .. })) => {
                            return Err(Error::Protocol(format!(
                                "{} speaks protocol {version}, expected {PROTOCOL_VERSION}",
                                self.addr
                            )))
                        }
                        Ok(Ok(other)) => return Err(Error::Protocol(format!("unexpected handshake reply {other:?}"))),
                        Ok(Err(e)) => return Err(e),
                        Err(e) => last = Some(e),
                    }
                }
                Err(e) => last = Some(e),
            }
        }
        Err(self.unreachable(last.map(|e| e.to_string()).unwrap_or_else(|| "no address".into())))
    }

    /// Sends one request and reads its reply. The outer error is a transport
    /// failure; the inner result is what the peer answered.
    fn exchange(&self, stream: &mut TcpStream, req: &Request) -> io::Result<Result<Response>> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        stream.write_all(&request_frame(id, req))?;
        let (msg_type, rid, body) =
            read_frame(stream)?.ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"))?;
        if rid != id {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("reply id {rid}, expected {id}"),
            ));
        }
        let mut d = Decoder::new(&body);
        if msg_type == ERROR_TYPE {
            return Ok(decode_error(&mut d).and_then(Err));
        }
        if msg_type != RESPONSE_BIT | req.msg_type() {
            return Ok(Err(Error::Protocol(format!(
                "reply type {msg_type:#06x} to request {:#06x}",
                req.msg_type()
            ))));
        }
        Ok(Response::decode_body(req.msg_type(), &mut d))
    }
}

impl Handler for RemoteHandler {
    fn handle(&self, req: Request) -> Result<Response> {
        for attempt in 0..2 {
            let pooled = self.pool.lock().unwrap().pop();
            let was_pooled = pooled.is_some();
            let mut stream = match pooled {
                Some(s) => s,
                None => self.connect()?,
            };
            match self.exchange(&mut stream, &req) {
                Ok(result) => {
                    self.pool.lock().unwrap().push(stream);
                    return result;
                }
                Err(e) if was_pooled && attempt == 0 => {
                    log::debug!("stale connection to {}: {e}; reconnecting", self.addr);
                    self.pool.lock().unwrap().clear();
                }
                Err(e) => return Err(self.unreachable(e)),
            }
        }
        unreachable!("second attempt always returns")
    }
}
