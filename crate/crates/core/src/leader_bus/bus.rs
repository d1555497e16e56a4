//! Read path for the leader's servo chain.

use std::collections::{HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::calibration::{CalibrationError, CalibrationMap, EncoderReading};
use super::frame::{encode_frame, instruction, FrameError, FrameParser, ServoFrame, BROADCAST_ID};
use crate::clock::mono_us;
use crate::kinematics::JointVector;

/// Present-position register (4 bytes, little-endian, signed).
pub const PRESENT_POSITION_ADDR: u16 = 132;
pub const PRESENT_POSITION_LEN: u16 = 4;
pub const DEFAULT_BAUD: u32 = 57_600;

#[derive(Debug, Error)]
pub enum BusError {
    #[error("servo {0} did not answer in time")]
    StaleRead(u8),
    #[error("repeated CRC failures while reading servo {0}")]
    Crc(u8),
    #[error("servo {id} reported error 0x{code:02x}")]
    Servo { id: u8, code: u8 },
    #[error("malformed status from servo {0}")]
    Malformed(u8),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("bus i/o: {0}")]
    Io(#[from] io::Error),
}

/// Byte pipe to the servos. Reads return `Ok(0)` when nothing arrived
/// within `timeout`.
pub trait Transport: Send {
    fn write_all(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn read(&mut self, buf: &mut [u8], timeout: Duration) -> io::Result<usize>;
    /// Drops any pending input.
    fn clear_input(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReadMode {
    /// One grouped request answered by every servo in turn.
    #[default]
    Sync,
    /// One request per servo, for buses that drop grouped replies.
    Sequential,
}

#[derive(Debug, Clone, Copy)]
pub struct BusOptions {
    pub timeout_per_servo: Duration,
    pub mode: ReadMode,
}

impl Default for BusOptions {
    fn default() -> Self {
        BusOptions {
            timeout_per_servo: Duration::from_millis(20),
            mode: ReadMode::Sync,
        }
    }
}

/// Exclusive owner of one serial bus.
pub struct ServoBus<T: Transport> {
    transport: T,
    parser: FrameParser,
    options: BusOptions,
}

enum Attempt {
    Done(HashMap<u8, Vec<u8>>),
    Missing { id: u8, crc_failed: bool },
}

impl<T: Transport> ServoBus<T> {
    pub fn new(transport: T, options: BusOptions) -> Self {
        ServoBus {
            transport,
            parser: FrameParser::new(),
            options,
        }
    }

    pub fn options(&self) -> &BusOptions {
        &self.options
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn crc_errors(&self) -> u64 {
        self.parser.stats().crc_errors
    }

    /// Sends `request` and collects status replies from `ids`, retrying once
    /// if a CRC failure left a reply missing.
    fn transact(&mut self, request: &[u8], ids: &[u8]) -> Result<HashMap<u8, Vec<u8>>, BusError> {
        let mut retried = false;
        loop {
            match self.attempt(request, ids)? {
                Attempt::Done(replies) => return Ok(replies),
                Attempt::Missing { id, crc_failed } => {
                    if crc_failed && !retried {
                        retried = true;
                        log::debug!("crc failure on servo {id}, retrying");
                        continue;
                    }
                    return Err(if crc_failed {
                        BusError::Crc(id)
                    } else {
                        BusError::StaleRead(id)
                    });
                }
            }
        }
    }

    fn attempt(&mut self, request: &[u8], ids: &[u8]) -> Result<Attempt, BusError> {
        self.transport.clear_input()?;
        self.parser.clear();
        let crc_before = self.parser.stats().crc_errors;
        self.transport.write_all(request)?;

        let timeout = self.options.timeout_per_servo;
        let mut replies: HashMap<u8, Vec<u8>> = HashMap::with_capacity(ids.len());
        let mut deadline = Instant::now() + timeout;
        let mut buf = [0u8; 256];
        while replies.len() < ids.len() {
            let now = Instant::now();
            if now >= deadline {
                let id = *ids.iter().find(|id| !replies.contains_key(id)).unwrap();
                let crc_failed = self.parser.stats().crc_errors > crc_before;
                return Ok(Attempt::Missing { id, crc_failed });
            }
            let n = self.transport.read(&mut buf, deadline - now)?;
            if n == 0 {
                continue;
            }
            for frame in self.parser.push(&buf[..n]) {
                if let Some(data) = self.accept_status(&frame, ids)? {
                    replies.insert(frame.id, data);
                    deadline = Instant::now() + timeout;
                }
            }
        }
        Ok(Attempt::Done(replies))
    }

    fn accept_status(&self, frame: &ServoFrame, ids: &[u8]) -> Result<Option<Vec<u8>>, BusError> {
        if frame.instruction != instruction::STATUS || !ids.contains(&frame.id) {
            return Ok(None);
        }
        let Some((&err, data)) = frame.params.split_first() else {
            return Err(BusError::Malformed(frame.id));
        };
        // Bit 7 is the hardware-alert flag; the data is still valid.
        if err & 0x7F != 0 {
            return Err(BusError::Servo {
                id: frame.id,
                code: err,
            });
        }
        Ok(Some(data.to_vec()))
    }

    /// Grouped read of `len` bytes at `address` from every id.
    pub fn sync_read(
        &mut self,
        ids: &[u8],
        address: u16,
        len: u16,
    ) -> Result<HashMap<u8, Vec<u8>>, BusError> {
        let mut params = Vec::with_capacity(4 + ids.len());
        params.extend_from_slice(&address.to_le_bytes());
        params.extend_from_slice(&len.to_le_bytes());
        params.extend_from_slice(ids);
        let request = encode_frame(BROADCAST_ID, instruction::SYNC_READ, &params)?;
        self.transact(&request, ids)
    }

    pub fn read(&mut self, id: u8, address: u16, len: u16) -> Result<Vec<u8>, BusError> {
        let mut params = Vec::with_capacity(4);
        params.extend_from_slice(&address.to_le_bytes());
        params.extend_from_slice(&len.to_le_bytes());
        let request = encode_frame(id, instruction::READ, &params)?;
        let mut replies = self.transact(&request, &[id])?;
        Ok(replies.remove(&id).unwrap_or_default())
    }

    /// Present position of every id, in the order given.
    pub fn read_positions(&mut self, ids: &[u8]) -> Result<Vec<EncoderReading>, BusError> {
        let raw = match self.options.mode {
            ReadMode::Sync => {
                self.sync_read(ids, PRESENT_POSITION_ADDR, PRESENT_POSITION_LEN)?
            }
            ReadMode::Sequential => {
                let mut out = HashMap::with_capacity(ids.len());
                for &id in ids {
                    out.insert(id, self.read(id, PRESENT_POSITION_ADDR, PRESENT_POSITION_LEN)?);
                }
                out
            }
        };
        let t_mono_us = mono_us();
        ids.iter()
            .map(|&id| {
                let data = &raw[&id];
                let bytes: [u8; 4] = data
                    .get(..4)
                    .and_then(|b| b.try_into().ok())
                    .ok_or(BusError::Malformed(id))?;
                Ok(EncoderReading {
                    servo_id: id,
                    ticks: i32::from_le_bytes(bytes),
                    t_mono_us,
                })
            })
            .collect()
    }
}

/// One leader sample in joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderState {
    pub q: JointVector,
    /// Trigger position in [0, 1] when a gripper channel is calibrated.
    pub gripper: Option<f64>,
    pub t_mono_us: u64,
}

/// Reads every calibrated servo and converts to joint angles ordered by
/// joint index. The timestamp marks read completion.
pub fn read_joint_state<T: Transport>(
    bus: &mut ServoBus<T>,
    calib: &CalibrationMap,
) -> Result<LeaderState, BusError> {
    let ids = calib.servo_ids();
    let readings = bus.read_positions(&ids)?;
    let mut q = Vec::with_capacity(calib.dof());
    for (entry, reading) in calib.joints().iter().zip(&readings) {
        q.push(super::calibration::ticks_to_radians(reading, entry));
    }
    let gripper = calib
        .gripper()
        .map(|g| g.normalize(readings[calib.dof()].ticks));
    Ok(LeaderState {
        q: JointVector::from_finite(q),
        gripper,
        t_mono_us: readings.first().map_or_else(mono_us, |r| r.t_mono_us),
    })
}

/// Hardware serial port, 8N1.
pub struct SerialTransport {
    port: Box<dyn serialport::SerialPort>,
}

impl SerialTransport {
    pub fn open(path: &str, baud: u32) -> Result<Self, BusError> {
        let port = serialport::new(path, baud)
            .data_bits(serialport::DataBits::Eight)
            .parity(serialport::Parity::None)
            .stop_bits(serialport::StopBits::One)
            .timeout(Duration::from_millis(20))
            .open()
            .map_err(io::Error::from)?;
        Ok(SerialTransport { port })
    }
}

impl Transport for SerialTransport {
    fn write_all(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.port.write_all(bytes)?;
        self.port.flush()
    }

    fn read(&mut self, buf: &mut [u8], timeout: Duration) -> io::Result<usize> {
        self.port
            .set_timeout(timeout.max(Duration::from_micros(100)))
            .map_err(io::Error::from)?;
        match self.port.read(buf) {
            Ok(n) => Ok(n),
            Err(e) if e.kind() == io::ErrorKind::TimedOut => Ok(0),
            Err(e) => Err(e),
        }
    }

    fn clear_input(&mut self) -> io::Result<()> {
        self.port
            .clear(serialport::ClearBuffer::Input)
            .map_err(io::Error::from)
    }
}

/// Replays a captured byte stream as bus input; writes are recorded.
#[derive(Debug, Default)]
pub struct CaptureTransport {
    input: VecDeque<u8>,
    pub written: Vec<u8>,
    /// Bytes handed out per read call, to exercise reassembly.
    chunk: usize,
}

impl CaptureTransport {
    pub fn new(capture: &[u8], chunk: usize) -> Self {
        CaptureTransport {
            input: capture.iter().copied().collect(),
            written: Vec::new(),
            chunk: chunk.max(1),
        }
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        self.input.extend(bytes);
    }
}

impl Transport for CaptureTransport {
    fn write_all(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.written.extend_from_slice(bytes);
        Ok(())
    }

    fn read(&mut self, buf: &mut [u8], timeout: Duration) -> io::Result<usize> {
        if self.input.is_empty() {
            std::thread::sleep(timeout.min(Duration::from_millis(1)));
            return Ok(0);
        }
        let n = buf.len().min(self.chunk).min(self.input.len());
        for (dst, src) in buf.iter_mut().zip(self.input.drain(..n)) {
            *dst = src;
        }
        Ok(n)
    }
}
