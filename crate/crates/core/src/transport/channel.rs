//! Channel endpoints over an in-process queue or a TCP stream.

use std::io::{BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::frame::{frame_decode, frame_encode, read_frame, MsgType, WireMessage, FRAMING_BYTES};
use super::ledger::{CommLedger, Direction, LedgerKey};
use crate::error::{Error, Result};

/// Moves whole encoded frames between two endpoints.
pub trait FrameLink: Send {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()>;
    /// `Ok(None)` once the peer has gone away.
    fn recv_frame(&mut self) -> Result<Option<Vec<u8>>>;
}

struct InProcLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl FrameLink for InProcLink {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.tx
            .send(frame.to_vec())
            .map_err(|_| Error::Io(std::io::Error::new(std::io::ErrorKind::BrokenPipe, "in-process peer dropped")))
    }

    fn recv_frame(&mut self) -> Result<Option<Vec<u8>>> {
        Ok(self.rx.recv().ok())
    }
}

struct TcpLink {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl FrameLink for TcpLink {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.writer.write_all(frame)?;
        Ok(())
    }

    fn recv_frame(&mut self) -> Result<Option<Vec<u8>>> {
        read_frame(&mut self.reader)
    }
}

/// One side of a channel. Every send and receive is recorded in the shared
/// ledger under this endpoint's entity name and current round.
pub struct Endpoint {
    entity: String,
    peer: String,
    link: Box<dyn FrameLink>,
    ledger: Arc<CommLedger>,
    round: u32,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint").field("entity", &self.entity).field("peer", &self.peer).finish()
    }
}

impl Endpoint {
    pub fn new(entity: impl Into<String>, peer: impl Into<String>, link: Box<dyn FrameLink>, ledger: Arc<CommLedger>) -> Self {
        Self { entity: entity.into(), peer: peer.into(), link, ledger, round: 0 }
    }

    pub fn from_tcp(stream: TcpStream, entity: impl Into<String>, peer: impl Into<String>, ledger: Arc<CommLedger>) -> Result<Self> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self::new(entity, peer, Box::new(TcpLink { writer: stream, reader }), ledger))
    }

    pub fn entity(&self) -> &str {
        &self.entity
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    pub fn set_peer(&mut self, peer: impl Into<String>) {
        self.peer = peer.into();
    }

    pub fn set_round(&mut self, round: usize) {
        self.round = round as u32;
    }

    fn key(&self, direction: Direction, msg_type: MsgType) -> LedgerKey {
        LedgerKey {
            entity: self.entity.clone(),
            peer: self.peer.clone(),
            direction,
            msg_type,
            round: self.round,
        }
    }

    pub fn send(&mut self, msg: &WireMessage) -> Result<()> {
        let frame = frame_encode(msg)?;
        self.link.send_frame(&frame).map_err(|e| match e {
            Error::Io(_) => Error::Disconnected { peer: self.peer.clone() },
            other => other,
        })?;
        self.ledger.record(self.key(Direction::Sent, msg.msg_type), msg.payload_bytes(), msg.header_bytes(), FRAMING_BYTES);
        Ok(())
    }

    pub fn recv(&mut self) -> Result<WireMessage> {
        let msg = self.recv_unrecorded()?;
        self.record_received(&msg);
        Ok(msg)
    }

    /// Receives without touching the ledger. Used for handshakes that learn
    /// the peer's name from the message; pair with `record_received`.
    pub fn recv_unrecorded(&mut self) -> Result<WireMessage> {
        let frame = self.link.recv_frame()?.ok_or_else(|| Error::Disconnected { peer: self.peer.clone() })?;
        let (msg, used) = frame_decode(&frame)?;
        if used != frame.len() {
            return Err(Error::Decode("trailing bytes after frame".into()));
        }
        Ok(msg)
    }

    pub fn record_received(&self, msg: &WireMessage) {
        self.ledger.record(self.key(Direction::Received, msg.msg_type), msg.payload_bytes(), msg.header_bytes(), FRAMING_BYTES);
    }

    /// Receives a message and fails unless it has the expected type.
    pub fn recv_type(&mut self, want: MsgType) -> Result<WireMessage> {
        let msg = self.recv()?;
        if msg.msg_type != want {
            return Err(Error::Protocol(format!(
                "{} expected {} from {}, got {}",
                self.entity,
                want.name(),
                self.peer,
                msg.msg_type.name()
            )));
        }
        Ok(msg)
    }
}

/// Connected endpoints over an in-process queue.
pub fn inproc_pair(a: &str, b: &str, ledger: &Arc<CommLedger>) -> (Endpoint, Endpoint) {
    let (tx_ab, rx_ab) = channel();
    let (tx_ba, rx_ba) = channel();
    (
        Endpoint::new(a, b, Box::new(InProcLink { tx: tx_ab, rx: rx_ba }), ledger.clone()),
        Endpoint::new(b, a, Box::new(InProcLink { tx: tx_ba, rx: rx_ab }), ledger.clone()),
    )
}

/// Connected endpoints over a loopback TCP connection on `host`.
pub fn tcp_pair(host: &str, a: &str, b: &str, ledger: &Arc<CommLedger>) -> Result<(Endpoint, Endpoint)> {
    let listener = TcpListener::bind((host, 0))?;
    let addr = listener.local_addr()?;
    let client = TcpStream::connect(addr)?;
    let (server, _) = listener.accept()?;
    Ok((
        Endpoint::from_tcp(client, a, b, ledger.clone())?,
        Endpoint::from_tcp(server, b, a, ledger.clone())?,
    ))
}

/// Connects to `addr`, retrying until `timeout` elapses.
pub fn connect_with_retry(addr: &str, timeout: Duration) -> Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        let attempt = addr
            .to_socket_addrs()
            .map_err(Error::from)
            .and_then(|mut it| it.next().ok_or_else(|| Error::Config(format!("cannot resolve {addr}"))))
            .and_then(|sa| TcpStream::connect(sa).map_err(Error::from));
        match attempt {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => std::thread::sleep(Duration::from_millis(50)),
        }
    }
}
