use std::collections::HashMap;

use thiserror::Error;

use crate::leader_bus::crc16;

pub const MAGIC: [u8; 4] = *b"GL01";
pub const VERSION: u8 = 1;
pub const MAX_DOF: usize = 16;
/// Bodies claiming more than this are treated as a lost frame boundary.
pub const MAX_BODY_LEN: usize = 4096;
const BODY_HEADER_LEN: usize = 16;
const PREFIX_LEN: usize = MAGIC.len() + 4;
pub const MAX_MESSAGE_LEN: usize = PREFIX_LEN + MAX_BODY_LEN + 2;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("dof {0} exceeds the protocol limit of {MAX_DOF}")]
    DofTooLarge(usize),
    #[error("payload carries {actual} joints but dof is {dof}")]
    DofMismatch { dof: u8, actual: usize },
    #[error("non-finite value in payload")]
    NonFinite,
    #[error("gripper value {0} outside [0, 1]")]
    GripperRange(f64),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("unknown session opcode {0}")]
    UnknownOpcode(u8),
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("payload length {len} does not fit message type {msg_type:?}")]
    PayloadLength { msg_type: MsgType, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MsgType {
    JointState = 1,
    JointCommand = 2,
    Safety = 3,
    Heartbeat = 4,
    GripperCommand = 5,
    SessionControl = 6,
}

impl TryFrom<u8> for MsgType {
    type Error = ProtocolError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Ok(match v {
            1 => MsgType::JointState,
            2 => MsgType::JointCommand,
            3 => MsgType::Safety,
            4 => MsgType::Heartbeat,
            5 => MsgType::GripperCommand,
            6 => MsgType::SessionControl,
            other => return Err(ProtocolError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SessionOp {
    Start = 1,
    Stop = 2,
    ResetFault = 3,
}

impl TryFrom<u8> for SessionOp {
    type Error = ProtocolError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Ok(match v {
            1 => SessionOp::Start,
            2 => SessionOp::Stop,
            3 => SessionOp::ResetFault,
            other => return Err(ProtocolError::UnknownOpcode(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    JointState(Vec<f64>),
    JointCommand(Vec<f64>),
    Safety {
        flags: u32,
        manipulability: f64,
        min_distance: f64,
    },
    Heartbeat,
    GripperCommand(f64),
    SessionControl(SessionOp),
}

impl Payload {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Payload::JointState(_) => MsgType::JointState,
            Payload::JointCommand(_) => MsgType::JointCommand,
            Payload::Safety { .. } => MsgType::Safety,
            Payload::Heartbeat => MsgType::Heartbeat,
            Payload::GripperCommand(_) => MsgType::GripperCommand,
            Payload::SessionControl(_) => MsgType::SessionControl,
        }
    }
}

/// One protocol message. `dof` is the sender's robot dof; for joint
/// payloads it equals the number of values.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub node_id: u8,
    pub dof: u8,
    pub seq: u32,
    pub t_mono_us: u64,
    pub payload: Payload,
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        self.payload.msg_type()
    }

    /// Joint message with `dof` taken from the values.
    pub fn joints(node_id: u8, seq: u32, t_mono_us: u64, command: bool, q: &[f64]) -> Self {
        let values = q.to_vec();
        Message {
            node_id,
            dof: q.len().min(u8::MAX as usize) as u8,
            seq,
            t_mono_us,
            payload: if command {
                Payload::JointCommand(values)
            } else {
                Payload::JointState(values)
            },
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.dof as usize > MAX_DOF {
            return Err(ProtocolError::DofTooLarge(self.dof as usize));
        }
        match &self.payload {
            Payload::JointState(q) | Payload::JointCommand(q) => {
                if q.len() > MAX_DOF {
                    return Err(ProtocolError::DofTooLarge(q.len()));
                }
                if q.len() != self.dof as usize {
                    return Err(ProtocolError::DofMismatch {
                        dof: self.dof,
                        actual: q.len(),
                    });
                }
                if q.iter().any(|v| !v.is_finite()) {
                    return Err(ProtocolError::NonFinite);
                }
            }
            Payload::Safety {
                manipulability,
                min_distance,
                ..
            } => {
                if !manipulability.is_finite() || !min_distance.is_finite() {
                    return Err(ProtocolError::NonFinite);
                }
            }
            Payload::GripperCommand(g) => {
                if !(0.0..=1.0).contains(g) {
                    return Err(ProtocolError::GripperRange(*g));
                }
            }
            Payload::Heartbeat | Payload::SessionControl(_) => {}
        }
        Ok(())
    }
}

pub fn encode_message(m: &Message) -> Result<Vec<u8>, ProtocolError> {
    m.validate()?;
    let mut body = Vec::with_capacity(BODY_HEADER_LEN + 8 * MAX_DOF);
    body.push(VERSION);
    body.push(m.msg_type() as u8);
    body.push(m.node_id);
    body.push(m.dof);
    body.extend_from_slice(&m.seq.to_le_bytes());
    body.extend_from_slice(&m.t_mono_us.to_le_bytes());
    match &m.payload {
        Payload::JointState(q) | Payload::JointCommand(q) => {
            for v in q {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        Payload::Safety {
            flags,
            manipulability,
            min_distance,
        } => {
            body.extend_from_slice(&flags.to_le_bytes());
            body.extend_from_slice(&manipulability.to_le_bytes());
            body.extend_from_slice(&min_distance.to_le_bytes());
        }
        Payload::Heartbeat => {}
        Payload::GripperCommand(g) => body.extend_from_slice(&g.to_le_bytes()),
        Payload::SessionControl(op) => body.push(*op as u8),
    }
    let mut out = Vec::with_capacity(PREFIX_LEN + body.len() + 2);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc16(&body).to_le_bytes());
    Ok(out)
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn decode_body(body: &[u8]) -> Result<Message, ProtocolError> {
    if body[0] != VERSION {
        return Err(ProtocolError::Version(body[0]));
    }
    let msg_type = MsgType::try_from(body[1])?;
    let node_id = body[2];
    let dof = body[3];
    let seq = u32::from_le_bytes(body[4..8].try_into().unwrap());
    let t_mono_us = u64::from_le_bytes(body[8..16].try_into().unwrap());
    let p = &body[BODY_HEADER_LEN..];
    let expect = |len: usize| {
        if p.len() == len {
            Ok(())
        } else {
            Err(ProtocolError::PayloadLength {
                msg_type,
                len: p.len(),
            })
        }
    };
    let payload = match msg_type {
        MsgType::JointState | MsgType::JointCommand => {
            expect(8 * dof as usize)?;
            let q: Vec<f64> = (0..dof as usize).map(|i| f64_at(p, 8 * i)).collect();
            if msg_type == MsgType::JointState {
                Payload::JointState(q)
            } else {
                Payload::JointCommand(q)
            }
        }
        MsgType::Safety => {
            expect(20)?;
            Payload::Safety {
                flags: u32::from_le_bytes(p[0..4].try_into().unwrap()),
                manipulability: f64_at(p, 4),
                min_distance: f64_at(p, 12),
            }
        }
        MsgType::Heartbeat => {
            expect(0)?;
            Payload::Heartbeat
        }
        MsgType::GripperCommand => {
            expect(8)?;
            Payload::GripperCommand(f64_at(p, 0))
        }
        MsgType::SessionControl => {
            expect(1)?;
            Payload::SessionControl(SessionOp::try_from(p[0])?)
        }
    };
    let m = Message {
        node_id,
        dof,
        seq,
        t_mono_us,
        payload,
    };
    m.validate()?;
    Ok(m)
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct DecodeStats {
    pub crc_errors: u64,
    /// Times the decoder lost the frame boundary and scanned forward.
    pub desyncs: u64,
    /// CRC-valid frames whose contents broke the message rules.
    pub invalid: u64,
}

impl DecodeStats {
    fn add(&mut self, other: DecodeStats) {
        self.crc_errors += other.crc_errors;
        self.desyncs += other.desyncs;
        self.invalid += other.invalid;
    }
}

#[derive(Debug)]
pub struct DecodeOutput<'a> {
    pub messages: Vec<Message>,
    pub remainder: &'a [u8],
    pub stats: DecodeStats,
}

fn find_magic(bytes: &[u8], from: usize) -> Option<usize> {
    bytes[from..]
        .windows(MAGIC.len())
        .position(|w| w == MAGIC)
        .map(|p| p + from)
}

fn partial_magic_suffix(bytes: &[u8]) -> usize {
    (1..MAGIC.len())
        .rev()
        .find(|&k| bytes.len() >= k && bytes[bytes.len() - k..] == MAGIC[..k])
        .unwrap_or(0)
}

/// Extracts every complete, valid message from `bytes`. The remainder is
/// always shorter than [`MAX_MESSAGE_LEN`].
pub fn decode_messages(bytes: &[u8]) -> DecodeOutput<'_> {
    let mut messages = Vec::new();
    let mut stats = DecodeStats::default();
    let mut pos = 0;
    let rest = loop {
        let Some(m) = find_magic(bytes, pos) else {
            let keep = partial_magic_suffix(&bytes[pos..]);
            if bytes.len() - keep > pos {
                stats.desyncs += 1;
            }
            break bytes.len() - keep;
        };
        if m > pos {
            stats.desyncs += 1;
        }
        if bytes.len() < m + PREFIX_LEN {
            break m;
        }
        let len = u32::from_le_bytes(bytes[m + 4..m + 8].try_into().unwrap()) as usize;
        if !(BODY_HEADER_LEN..=MAX_BODY_LEN).contains(&len) {
            stats.desyncs += 1;
            pos = m + 1;
            continue;
        }
        let end = m + PREFIX_LEN + len + 2;
        if bytes.len() < end {
            break m;
        }
        let body = &bytes[m + PREFIX_LEN..end - 2];
        let crc = u16::from_le_bytes([bytes[end - 2], bytes[end - 1]]);
        if crc16(body) != crc {
            stats.crc_errors += 1;
            pos = m + 1;
            continue;
        }
        match decode_body(body) {
            Ok(msg) => messages.push(msg),
            Err(e) => {
                log::debug!("dropping message: {e}");
                stats.invalid += 1;
            }
        }
        pos = end;
    };
    DecodeOutput {
        messages,
        remainder: &bytes[rest..],
        stats,
    }
}

/// Incremental decoder for a byte stream.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
    stats: DecodeStats,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) -> Vec<Message> {
        self.buf.extend_from_slice(bytes);
        let out = decode_messages(&self.buf);
        self.stats.add(out.stats);
        let consumed = self.buf.len() - out.remainder.len();
        let messages = out.messages;
        self.buf.drain(..consumed);
        messages
    }

    pub fn stats(&self) -> DecodeStats {
        self.stats
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// True when the last heartbeat is more than `timeout_ms` old. A heartbeat
/// stamped in the future counts as stale.
pub fn staleness_check(last_heartbeat_t_us: u64, now_us: u64, timeout_ms: u64) -> bool {
    if now_us < last_heartbeat_t_us {
        log::warn!("clock regression: heartbeat at {last_heartbeat_t_us} us, now {now_us} us");
        return true;
    }
    now_us - last_heartbeat_t_us > timeout_ms.saturating_mul(1000)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqEvent {
    First,
    Next,
    /// `missed` sequence numbers were skipped.
    Gap { missed: u32 },
    /// Repeated or older than one already seen; the message should be dropped.
    Stale,
}

/// Per (node, type) sequence bookkeeping on the receiving side.
#[derive(Debug, Default)]
pub struct SeqTracker {
    last: HashMap<(u8, MsgType), u32>,
    pub gaps: u64,
    pub missed: u64,
    pub stale: u64,
}

impl SeqTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, m: &Message) -> SeqEvent {
        let key = (m.node_id, m.msg_type());
        let event = match self.last.get(&key) {
            None => SeqEvent::First,
            Some(&prev) if m.seq <= prev => SeqEvent::Stale,
            Some(&prev) if m.seq == prev + 1 => SeqEvent::Next,
            Some(&prev) => SeqEvent::Gap {
                missed: m.seq - prev - 1,
            },
        };
        match event {
            SeqEvent::Stale => self.stale += 1,
            SeqEvent::Gap { missed } => {
                self.gaps += 1;
                self.missed += missed as u64;
                self.last.insert(key, m.seq);
            }
            _ => {
                self.last.insert(key, m.seq);
            }
        }
        event
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staleness_boundaries() {
        assert!(!staleness_check(1000, 1000, 200));
        assert!(!staleness_check(1000, 201_000, 200));
        assert!(staleness_check(1000, 201_001, 200));
        assert!(staleness_check(5000, 4000, 200));
    }

    #[test]
    fn seq_tracker_counts_gaps_and_drops_stale() {
        let mut t = SeqTracker::new();
        let hb = |seq| Message {
            node_id: 1,
            dof: 0,
            seq,
            t_mono_us: 0,
            payload: Payload::Heartbeat,
        };
        assert_eq!(t.observe(&hb(4)), SeqEvent::First);
        assert_eq!(t.observe(&hb(5)), SeqEvent::Next);
        assert_eq!(t.observe(&hb(9)), SeqEvent::Gap { missed: 3 });
        assert_eq!(t.observe(&hb(9)), SeqEvent::Stale);
        assert_eq!(t.observe(&hb(7)), SeqEvent::Stale);
        assert_eq!(t.observe(&hb(10)), SeqEvent::Next);
        assert_eq!((t.gaps, t.missed, t.stale), (1, 3, 2));
        // Streams are independent per type.
        let cmd = Message::joints(1, 0, 0, true, &[0.0]);
        assert_eq!(t.observe(&cmd), SeqEvent::First);
    }

    #[test]
    fn encode_validates() {
        let big = Message::joints(1, 0, 0, false, &[0.0; 17]);
        assert!(matches!(encode_message(&big), Err(ProtocolError::DofTooLarge(17))));
        let mut bad = Message::joints(1, 0, 0, false, &[0.0; 2]);
        bad.dof = 3;
        assert!(encode_message(&bad).is_err());
        let nan = Message::joints(1, 0, 0, false, &[f64::NAN]);
        assert_eq!(encode_message(&nan), Err(ProtocolError::NonFinite));
        let grip = Message {
            node_id: 1,
            dof: 6,
            seq: 0,
            t_mono_us: 0,
            payload: Payload::GripperCommand(1.5),
        };
        assert!(encode_message(&grip).is_err());
    }

    #[test]
    fn oversize_length_is_a_desync() {
        let good = encode_message(&Message::joints(2, 7, 9, true, &[0.5])).unwrap();
        let mut stream = MAGIC.to_vec();
        stream.extend_from_slice(&(MAX_BODY_LEN as u32 + 1).to_le_bytes());
        stream.extend_from_slice(&good);
        let out = decode_messages(&stream);
        assert_eq!(out.messages.len(), 1);
        assert!(out.stats.desyncs >= 1);
        assert!(out.remainder.is_empty());
    }

    #[test]
    fn bad_version_and_type_are_invalid() {
        let mut bytes = encode_message(&Message::joints(2, 7, 9, true, &[0.5])).unwrap();
        bytes[8] = 2;
        let n = bytes.len();
        let crc = crc16(&bytes[8..n - 2]).to_le_bytes();
        bytes[n - 2..].copy_from_slice(&crc);
        let out = decode_messages(&bytes);
        assert!(out.messages.is_empty());
        assert_eq!(out.stats.invalid, 1);
    }
}
