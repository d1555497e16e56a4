//! Static pub/sub over TCP, plus an in-process byte channel with the same framing.

use std::collections::HashMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::mono_us;

use super::message::{
    encode_message, DecodeStats, Message, MsgType, Payload, ProtocolError, SeqEvent, SeqTracker,
    StreamDecoder,
};

pub const HEARTBEAT_PERIOD_US: u64 = 100_000;
const QUEUE_DEPTH: usize = 256;
const POLL: Duration = Duration::from_millis(20);
const RECONNECT: Duration = Duration::from_millis(100);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("topology: {0}")]
    Topology(String),
    #[error("cannot resolve address `{0}`")]
    Address(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub name: String,
    pub listen: String,
    #[serde(default)]
    pub peers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub nodes: Vec<NodeEntry>,
}

impl Topology {
    pub fn from_json_str(text: &str) -> Result<Self, TransportError> {
        let t: Topology =
            serde_json::from_str(text).map_err(|e| TransportError::Topology(e.to_string()))?;
        for (i, n) in t.nodes.iter().enumerate() {
            if t.nodes[..i].iter().any(|o| o.name == n.name) {
                return Err(TransportError::Topology(format!("duplicate node `{}`", n.name)));
            }
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TransportError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| TransportError::Topology(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn node(&self, name: &str) -> Result<&NodeEntry, TransportError> {
        self.nodes
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| TransportError::Topology(format!("no node named `{name}`")))
    }

    /// Peer addresses of `name`; a peer naming another node resolves to its listen address.
    pub fn peer_addrs(&self, name: &str) -> Result<Vec<String>, TransportError> {
        Ok(self
            .node(name)?
            .peers
            .iter()
            .map(|p| match self.nodes.iter().find(|n| &n.name == p) {
                Some(n) => n.listen.clone(),
                None => p.clone(),
            })
            .collect())
    }
}

fn resolve(addr: &str) -> Result<SocketAddr, TransportError> {
    addr.to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .ok_or_else(|| TransportError::Address(addr.to_string()))
}

enum Outbound {
    Tcp(SyncSender<Arc<[u8]>>),
    Channel(Sender<Vec<u8>>),
}

/// Pushes framed messages to every configured peer. Per-type sequence
/// numbers are assigned here.
pub struct Publisher {
    node_id: u8,
    seq: HashMap<MsgType, u32>,
    outs: Vec<Outbound>,
    dropped: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
}

impl Publisher {
    pub fn new(node_id: u8) -> Self {
        Publisher {
            node_id,
            seq: HashMap::new(),
            outs: Vec::new(),
            dropped: Arc::new(AtomicU64::new(0)),
            stop: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn node_id(&self) -> u8 {
        self.node_id
    }

    /// Adds a TCP peer served by its own writer thread; it reconnects on failure
    /// and drops frames while disconnected.
    pub fn connect(&mut self, addr: &str) -> Result<(), TransportError> {
        let target = resolve(addr)?;
        let (tx, rx) = mpsc::sync_channel::<Arc<[u8]>>(QUEUE_DEPTH);
        let stop = self.stop.clone();
        let dropped = self.dropped.clone();
        thread::Builder::new()
            .name(format!("pub-{target}"))
            .spawn(move || writer_loop(target, rx, stop, dropped))?;
        self.outs.push(Outbound::Tcp(tx));
        Ok(())
    }

    /// Adds an in-process peer; pair the receiver with [`Subscriber::from_bytes`].
    pub fn add_channel(&mut self) -> Receiver<Vec<u8>> {
        let (tx, rx) = mpsc::channel();
        self.outs.push(Outbound::Channel(tx));
        rx
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    /// Stamps `payload` with this node's id and the next sequence number.
    pub fn publish(&mut self, dof: u8, t_mono_us: u64, payload: Payload) -> Result<Message, TransportError> {
        let seq = *self.seq.entry(payload.msg_type()).or_insert(0);
        let m = Message {
            node_id: self.node_id,
            dof,
            seq,
            t_mono_us,
            payload,
        };
        self.send(&m)?;
        self.seq.insert(m.msg_type(), seq.wrapping_add(1));
        Ok(m)
    }

    pub fn heartbeat(&mut self, dof: u8, t_mono_us: u64) -> Result<Message, TransportError> {
        self.publish(dof, t_mono_us, Payload::Heartbeat)
    }

    /// Sends a message as is, keeping its node id and sequence number.
    pub fn send(&mut self, m: &Message) -> Result<(), TransportError> {
        let bytes: Arc<[u8]> = encode_message(m)?.into();
        self.outs.retain(|o| match o {
            Outbound::Tcp(tx) => match tx.try_send(bytes.clone()) {
                Ok(()) => true,
                Err(TrySendError::Full(_)) => {
                    self.dropped.fetch_add(1, Ordering::Relaxed);
                    true
                }
                Err(TrySendError::Disconnected(_)) => false,
            },
            Outbound::Channel(tx) => tx.send(bytes.to_vec()).is_ok(),
        });
        Ok(())
    }
}

impl Drop for Publisher {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

fn writer_loop(
    target: SocketAddr,
    rx: Receiver<Arc<[u8]>>,
    stop: Arc<AtomicBool>,
    dropped: Arc<AtomicU64>,
) {
    let mut stream: Option<TcpStream> = None;
    let mut warned = false;
    while !stop.load(Ordering::Relaxed) {
        if stream.is_none() {
            match TcpStream::connect_timeout(&target, RECONNECT) {
                Ok(s) => {
                    let _ = s.set_nodelay(true);
                    log::info!("connected to {target}");
                    warned = false;
                    stream = Some(s);
                }
                Err(e) => {
                    if !warned {
                        log::warn!("peer {target} unavailable: {e}");
                        warned = true;
                    }
                    // Stale frames are useless to a real-time consumer.
                    while rx.try_recv().is_ok() {
                        dropped.fetch_add(1, Ordering::Relaxed);
                    }
                    thread::sleep(RECONNECT);
                    continue;
                }
            }
        }
        match rx.recv_timeout(POLL) {
            Ok(frame) => {
                let s = stream.as_mut().expect("connected above");
                if let Err(e) = s.write_all(&frame) {
                    log::warn!("write to {target} failed: {e}");
                    dropped.fetch_add(1, Ordering::Relaxed);
                    stream = None;
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
}

/// Receives messages from any number of inbound links. Messages that are
/// repeated or older than one already delivered for their (node, type)
/// stream are dropped.
pub struct Subscriber {
    rx: Receiver<(Message, u64)>,
    local_addr: Option<SocketAddr>,
    stop: Arc<AtomicBool>,
    stats: Arc<Mutex<DecodeStats>>,
    tracker: SeqTracker,
}

impl Subscriber {
    pub fn bind(addr: &str) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(resolve(addr)?)?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(Mutex::new(DecodeStats::default()));
        let (s2, st2) = (stop.clone(), stats.clone());
        thread::Builder::new()
            .name(format!("sub-{local_addr}"))
            .spawn(move || accept_loop(listener, tx, s2, st2))?;
        Ok(Subscriber {
            rx,
            local_addr: Some(local_addr),
            stop,
            stats,
            tracker: SeqTracker::new(),
        })
    }

    /// Decodes frames arriving over an in-process byte channel.
    pub fn from_bytes(bytes: Receiver<Vec<u8>>) -> Self {
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(Mutex::new(DecodeStats::default()));
        let st2 = stats.clone();
        thread::spawn(move || {
            let mut dec = StreamDecoder::new();
            while let Ok(chunk) = bytes.recv() {
                let msgs = dec.push(&chunk);
                *st2.lock().unwrap() = dec.stats();
                let at = mono_us();
                for m in msgs {
                    if tx.send((m, at)).is_err() {
                        return;
                    }
                }
            }
        });
        Subscriber {
            rx,
            local_addr: None,
            stop,
            stats,
            tracker: SeqTracker::new(),
        }
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.local_addr
    }

    pub fn decode_stats(&self) -> DecodeStats {
        *self.stats.lock().unwrap()
    }

    pub fn seq_tracker(&self) -> &SeqTracker {
        &self.tracker
    }

    fn admit(&mut self, m: &Message) -> bool {
        match self.tracker.observe(m) {
            SeqEvent::Stale => {
                log::debug!("dropping out-of-order {:?} seq {} from node {}", m.msg_type(), m.seq, m.node_id);
                false
            }
            SeqEvent::Gap { missed } => {
                log::debug!("{missed} {:?} messages missed from node {}", m.msg_type(), m.node_id);
                true
            }
            _ => true,
        }
    }

    /// Next message, or `None` when `timeout` passes first or all senders are gone.
    pub fn recv_timeout(&mut self, timeout: Duration) -> Option<Message> {
        self.recv_stamped(timeout).map(|(m, _)| m)
    }

    /// Like [`Self::recv_timeout`], also returning the local decode time in µs.
    pub fn recv_stamped(&mut self, timeout: Duration) -> Option<(Message, u64)> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            let (m, at) = self.rx.recv_timeout(left).ok()?;
            if self.admit(&m) {
                return Some((m, at));
            }
        }
    }

    pub fn try_recv(&mut self) -> Option<Message> {
        self.try_recv_stamped().map(|(m, _)| m)
    }

    pub fn try_recv_stamped(&mut self) -> Option<(Message, u64)> {
        while let Ok((m, at)) = self.rx.try_recv() {
            if self.admit(&m) {
                return Some((m, at));
            }
        }
        None
    }

    /// Everything currently queued.
    pub fn drain(&mut self) -> Vec<Message> {
        std::iter::from_fn(|| self.try_recv()).collect()
    }

    pub fn drain_stamped(&mut self) -> Vec<(Message, u64)> {
        std::iter::from_fn(|| self.try_recv_stamped()).collect()
    }
}

impl Drop for Subscriber {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

fn accept_loop(
    listener: TcpListener,
    tx: Sender<(Message, u64)>,
    stop: Arc<AtomicBool>,
    stats: Arc<Mutex<DecodeStats>>,
) {
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("inbound connection from {peer}");
                let (tx, stop, stats) = (tx.clone(), stop.clone(), stats.clone());
                let spawned = thread::Builder::new()
                    .name(format!("read-{peer}"))
                    .spawn(move || read_loop(stream, tx, stop, stats));
                if let Err(e) = spawned {
                    log::error!("cannot spawn reader: {e}");
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::error!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn read_loop(
    mut stream: TcpStream,
    tx: Sender<(Message, u64)>,
    stop: Arc<AtomicBool>,
    stats: Arc<Mutex<DecodeStats>>,
) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(POLL));
    let mut dec = StreamDecoder::new();
    let mut seen = DecodeStats::default();
    let mut buf = [0u8; 8192];
    while !stop.load(Ordering::Relaxed) {
        match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                let msgs = dec.push(&buf[..n]);
                let now = dec.stats();
                if now != seen {
                    let mut s = stats.lock().unwrap();
                    s.crc_errors += now.crc_errors - seen.crc_errors;
                    s.desyncs += now.desyncs - seen.desyncs;
                    s.invalid += now.invalid - seen.invalid;
                    seen = now;
                }
                let at = mono_us();
                for m in msgs {
                    if tx.send((m, at)).is_err() {
                        return;
                    }
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => {
                log::warn!("read failed: {e}");
                break;
            }
        }
    }
}

/// Fires once per period on a monotonic clock.
#[derive(Debug, Clone)]
pub struct HeartbeatTimer {
    period_us: u64,
    next_us: Option<u64>,
}

impl HeartbeatTimer {
    pub fn new(period_us: u64) -> Self {
        HeartbeatTimer { period_us, next_us: None }
    }

    pub fn due(&mut self, now_us: u64) -> bool {
        match self.next_us {
            Some(n) if now_us < n => false,
            _ => {
                self.next_us = Some(now_us + self.period_us);
                true
            }
        }
    }
}

impl Default for HeartbeatTimer {
    fn default() -> Self {
        Self::new(HEARTBEAT_PERIOD_US)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_resolves_named_peers() {
        let t = Topology::from_json_str(
            r#"{"nodes":[
                {"name":"leader","listen":"127.0.0.1:5555","peers":["follower","10.0.0.2:7000"]},
                {"name":"follower","listen":"127.0.0.1:5556"}]}"#,
        )
        .unwrap();
        assert_eq!(t.peer_addrs("leader").unwrap(), vec!["127.0.0.1:5556", "10.0.0.2:7000"]);
        assert!(t.peer_addrs("ghost").is_err());
        assert!(Topology::from_json_str(r#"{"nodes":[{"name":"a","listen":"x","extra":1}]}"#).is_err());
        assert!(Topology::from_json_str(
            r#"{"nodes":[{"name":"a","listen":"x"},{"name":"a","listen":"y"}]}"#
        )
        .is_err());
    }

    #[test]
    fn heartbeat_timer_period() {
        let mut h = HeartbeatTimer::new(100);
        assert!(h.due(0));
        assert!(!h.due(99));
        assert!(h.due(100));
        assert!(!h.due(150));
    }

    #[test]
    fn channel_loopback_assigns_sequences() {
        let mut p = Publisher::new(3);
        let mut s = Subscriber::from_bytes(p.add_channel());
        for i in 0..5 {
            p.publish(2, i, Payload::JointState(vec![0.0, i as f64])).unwrap();
        }
        p.heartbeat(2, 9).unwrap();
        let got: Vec<Message> = (0..6).filter_map(|_| s.recv_timeout(Duration::from_secs(1))).collect();
        assert_eq!(got.len(), 6);
        assert_eq!(got.iter().map(|m| m.seq).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 0]);
    }
}
