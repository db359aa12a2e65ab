//! TCP transport.
//!
//! Wire format, one frame per [`Message`]:
//!
//! ```text
//! +---------------------+-----------------------------------+
//! | length: u32, BE     | UTF-8 JSON object {"type": ...}   |
//! +---------------------+-----------------------------------+
//! ```
//!
//! Every connection opens with a `Hello` frame from the connecting side so
//! the acceptor knows which worker is on the other end. Buffers connect to
//! the producer; consumers connect to their buffer.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use log::debug;
use thiserror::Error;

use super::transport::{Endpoint, Inbound, Peer, TransportError, TransportHandle};
use super::{Message, Topology};
use crate::types::WorkerId;

/// Largest accepted payload. Bigger length prefixes drop the connection.
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte cap")]
    TooLarge(u64),
    #[error("bad payload: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("connection closed")]
    Closed,
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, FrameError> {
    let payload = serde_json::to_vec(msg)?;
    if payload.len() as u64 > MAX_FRAME_LEN as u64 {
        return Err(FrameError::TooLarge(payload.len() as u64));
    }
    let mut frame = Vec::with_capacity(4 + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<(), FrameError> {
    w.write_all(&encode_frame(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. A clean EOF before the length prefix is
/// [`FrameError::Closed`].
pub fn read_frame<R: Read>(r: &mut R) -> Result<Message, FrameError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(FrameError::Closed),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(FrameError::TooLarge(len as u64));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(serde_json::from_slice(&payload)?)
}

/// Connects to `addr` and introduces ourselves as `me`.
pub fn connect(addr: SocketAddr, me: WorkerId) -> Result<TcpStream, TransportError> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    write_frame(&mut stream, &Message::Hello { worker: me })?;
    Ok(stream)
}

/// Accepts exactly the `expected` workers on `listener`, matching each
/// connection to a worker through its `Hello` frame.
pub fn accept_peers(
    listener: &TcpListener,
    expected: &[WorkerId],
    timeout: Duration,
) -> Result<HashMap<WorkerId, TcpStream>, TransportError> {
    let deadline = Instant::now() + timeout;
    listener.set_nonblocking(true)?;
    let mut peers = HashMap::new();
    while peers.len() < expected.len() {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
                let hello = read_frame(&mut stream)?;
                stream.set_read_timeout(None)?;
                match hello {
                    Message::Hello { worker } if expected.contains(&worker) => {
                        if peers.insert(worker, stream).is_some() {
                            return Err(TransportError::Handshake(format!(
                                "worker {worker} connected twice"
                            )));
                        }
                    }
                    other => {
                        return Err(TransportError::Handshake(format!(
                            "unexpected opening frame {}",
                            other.kind()
                        )))
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(TransportError::Handshake(format!(
                        "timed out with {}/{} peers connected",
                        peers.len(),
                        expected.len()
                    )));
                }
                thread::sleep(Duration::from_millis(1));
            }
            Err(e) => return Err(e.into()),
        }
    }
    listener.set_nonblocking(false)?;
    Ok(peers)
}

/// Endpoint over a set of established TCP links.
pub struct TcpEndpoint {
    me: WorkerId,
    inbox: Receiver<Inbound>,
    inbox_tx: Sender<Inbound>,
    writers: HashMap<WorkerId, Mutex<BufWriter<TcpStream>>>,
}

impl TcpEndpoint {
    pub fn new(me: WorkerId, links: HashMap<WorkerId, TcpStream>) -> Result<Self, TransportError> {
        let (inbox_tx, inbox) = unbounded();
        let mut writers = HashMap::new();
        for (peer, stream) in links {
            let reader = stream.try_clone()?;
            let tx = inbox_tx.clone();
            thread::Builder::new()
                .name(format!("tcp-rx-{}-{}", me, peer))
                .spawn(move || reader_loop(peer, reader, tx))
                .map_err(TransportError::Io)?;
            writers.insert(peer, Mutex::new(BufWriter::new(stream)));
        }
        Ok(Self {
            me,
            inbox,
            inbox_tx,
            writers,
        })
    }

    /// Sender that injects messages into this endpoint's inbox; the engine
    /// uses it to reach the producer.
    pub fn inbox_sender(&self) -> Sender<Inbound> {
        self.inbox_tx.clone()
    }
}

fn reader_loop(peer: WorkerId, stream: TcpStream, inbox: Sender<Inbound>) {
    let mut reader = BufReader::new(stream);
    loop {
        match read_frame(&mut reader) {
            Ok(msg) => {
                if inbox
                    .send(Inbound::Message {
                        from: Peer::Worker(peer),
                        msg,
                    })
                    .is_err()
                {
                    return;
                }
            }
            Err(e) => {
                debug!("link to {peer} closed: {e}");
                if let Ok(stream) = reader.get_ref().try_clone() {
                    let _ = stream.shutdown(Shutdown::Both);
                }
                let _ = inbox.send(Inbound::Lost(Peer::Worker(peer)));
                return;
            }
        }
    }
}

impl Endpoint for TcpEndpoint {
    fn me(&self) -> WorkerId {
        self.me
    }

    fn send(&self, to: WorkerId, msg: Message) -> Result<(), TransportError> {
        let writer = self.writers.get(&to).ok_or(TransportError::NoRoute {
            from: self.me,
            to,
        })?;
        let mut w = writer.lock().map_err(|_| TransportError::Closed(to))?;
        write_frame(&mut *w, &msg).map_err(|e| match e {
            FrameError::Io(_) | FrameError::Closed => TransportError::Closed(to),
            other => TransportError::Frame(other),
        })
    }

    fn recv(&self, deadline: Option<Instant>) -> Result<Option<Inbound>, TransportError> {
        match deadline {
            None => self
                .inbox
                .recv()
                .map(Some)
                .map_err(|_| TransportError::InboxClosed),
            Some(d) => match self.inbox.recv_deadline(d) {
                Ok(m) => Ok(Some(m)),
                Err(RecvTimeoutError::Timeout) => Ok(None),
                Err(RecvTimeoutError::Disconnected) => Err(TransportError::InboxClosed),
            },
        }
    }
}

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        for w in self.writers.values() {
            if let Ok(mut w) = w.lock() {
                let _ = w.flush();
                let _ = w.get_ref().shutdown(Shutdown::Both);
            }
        }
    }
}

/// Builds the whole tree over loopback-style TCP inside one process: the
/// producer listens on `listen_addr`, each buffer on an ephemeral port of the
/// same interface.
pub fn transport_tcp(
    topology: &Topology,
    listen_addr: SocketAddr,
) -> Result<TransportHandle, TransportError> {
    let producer_listener = TcpListener::bind(listen_addr)?;
    let producer_addr = producer_listener.local_addr()?;
    let buffer_ids: Vec<WorkerId> = topology.buffers().collect();

    let accept_buffers = {
        let ids = buffer_ids.clone();
        thread::spawn(move || accept_peers(&producer_listener, &ids, HANDSHAKE_TIMEOUT))
    };

    let mut buffer_links = Vec::new();
    let mut consumer_accepts = Vec::new();
    let mut consumer_addrs = HashMap::new();
    for &b in &buffer_ids {
        let listener = TcpListener::bind(SocketAddr::new(producer_addr.ip(), 0))?;
        consumer_addrs.insert(b, listener.local_addr()?);
        let upstream = connect(producer_addr, b)?;
        buffer_links.push((b, upstream));
        let ids = topology.consumers_of(b);
        consumer_accepts.push(thread::spawn(move || {
            accept_peers(&listener, &ids, HANDSHAKE_TIMEOUT)
        }));
    }

    let mut consumers = Vec::new();
    for c in topology.consumers() {
        let parent = topology.buffer_of(c).expect("consumer has a buffer");
        let stream = connect(consumer_addrs[&parent], c)?;
        consumers.push(Box::new(TcpEndpoint::new(c, HashMap::from([(parent, stream)]))?)
            as Box<dyn Endpoint>);
    }

    let join = |h: thread::JoinHandle<Result<HashMap<WorkerId, TcpStream>, TransportError>>| {
        h.join()
            .map_err(|_| TransportError::Handshake("acceptor panicked".into()))?
    };
    let producer_links = join(accept_buffers)?;
    let producer = TcpEndpoint::new(WorkerId::PRODUCER, producer_links)?;
    let engine_link = producer.inbox_sender();

    let mut buffers = Vec::new();
    for ((b, upstream), accept) in buffer_links.into_iter().zip(consumer_accepts) {
        let mut links = join(accept)?;
        links.insert(WorkerId::PRODUCER, upstream);
        buffers.push(Box::new(TcpEndpoint::new(b, links)?) as Box<dyn Endpoint>);
    }

    Ok(TransportHandle {
        topology: topology.clone(),
        producer: Box::new(producer),
        engine_link,
        buffers,
        consumers,
    })
}
