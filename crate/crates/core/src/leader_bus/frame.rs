//! Servo bus packet framing.
//!
//! ```text
//! FF FF FD 00 | id | len (u16 LE) | instruction | params ... | crc (u16 LE)
//! ```
//!
//! `len` counts the instruction byte, the params and the two CRC bytes. The
//! CRC covers every byte from the first header byte through the last param.

use thiserror::Error;

use super::crc::crc16;

pub const HEADER: [u8; 4] = [0xFF, 0xFF, 0xFD, 0x00];
/// Largest params payload that still fits the u16 length field.
pub const MAX_PARAMS: usize = 65532;
/// Header, id and length field.
const PREFIX_LEN: usize = 7;
/// Largest well-formed frame on the wire.
pub const MAX_FRAME_LEN: usize = PREFIX_LEN + MAX_PARAMS + 3;
/// Highest addressable servo id.
pub const MAX_SERVO_ID: u8 = 252;
pub const BROADCAST_ID: u8 = 0xFE;

pub mod instruction {
    pub const PING: u8 = 0x01;
    pub const READ: u8 = 0x02;
    pub const WRITE: u8 = 0x03;
    pub const STATUS: u8 = 0x55;
    pub const SYNC_READ: u8 = 0x82;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("servo id {0} is out of range")]
    InvalidId(u8),
    #[error("payload of {0} bytes exceeds the {MAX_PARAMS}-byte limit")]
    Oversize(usize),
}

/// One decoded (or to-be-encoded) bus packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServoFrame {
    pub id: u8,
    pub instruction: u8,
    pub params: Vec<u8>,
    pub crc: u16,
}

fn valid_id(id: u8) -> bool {
    id <= MAX_SERVO_ID || id == BROADCAST_ID
}

impl ServoFrame {
    pub fn new(id: u8, instruction: u8, params: Vec<u8>) -> Result<Self, FrameError> {
        let bytes = encode_frame(id, instruction, &params)?;
        let n = bytes.len();
        let crc = u16::from_le_bytes([bytes[n - 2], bytes[n - 1]]);
        Ok(ServoFrame {
            id,
            instruction,
            params,
            crc,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        encode_frame(self.id, self.instruction, &self.params)
    }
}

pub fn encode_frame(id: u8, instruction: u8, params: &[u8]) -> Result<Vec<u8>, FrameError> {
    if !valid_id(id) {
        return Err(FrameError::InvalidId(id));
    }
    if params.len() > MAX_PARAMS {
        return Err(FrameError::Oversize(params.len()));
    }
    let len = (params.len() + 3) as u16;
    let mut out = Vec::with_capacity(PREFIX_LEN + params.len() + 3);
    out.extend_from_slice(&HEADER);
    out.push(id);
    out.extend_from_slice(&len.to_le_bytes());
    out.push(instruction);
    out.extend_from_slice(params);
    let crc = crc16(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Counters accumulated while scanning a byte stream.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ParseStats {
    pub crc_errors: u64,
    /// Bytes discarded while hunting for a header.
    pub skipped_bytes: u64,
}

#[derive(Debug)]
pub struct ParseOutput<'a> {
    pub frames: Vec<ServoFrame>,
    /// Trailing bytes that may still begin a frame.
    pub remainder: &'a [u8],
    pub stats: ParseStats,
}

fn find_header(bytes: &[u8], from: usize) -> Option<usize> {
    bytes[from..]
        .windows(HEADER.len())
        .position(|w| w == HEADER)
        .map(|p| p + from)
}

/// Length of the longest suffix of `bytes` that is a proper prefix of the header.
fn partial_header_suffix(bytes: &[u8]) -> usize {
    (1..HEADER.len())
        .rev()
        .find(|&k| bytes.len() >= k && bytes[bytes.len() - k..] == HEADER[..k])
        .unwrap_or(0)
}

/// Extracts every complete, CRC-valid frame from `bytes`.
///
/// Garbage is skipped by scanning for the next header; a frame whose CRC does
/// not match is dropped, counted, and scanning resumes one byte past its
/// header. The remainder is always shorter than [`MAX_FRAME_LEN`].
pub fn parse_frames(bytes: &[u8]) -> ParseOutput<'_> {
    let mut frames = Vec::new();
    let mut stats = ParseStats::default();
    let mut pos = 0;
    let remainder_start = loop {
        let Some(h) = find_header(bytes, pos) else {
            let keep = partial_header_suffix(&bytes[pos..]);
            stats.skipped_bytes += (bytes.len() - pos - keep) as u64;
            break bytes.len() - keep;
        };
        stats.skipped_bytes += (h - pos) as u64;
        if bytes.len() < h + PREFIX_LEN {
            break h;
        }
        let id = bytes[h + 4];
        let len = u16::from_le_bytes([bytes[h + 5], bytes[h + 6]]) as usize;
        if len < 3 || !valid_id(id) {
            stats.skipped_bytes += 1;
            pos = h + 1;
            continue;
        }
        let total = PREFIX_LEN + len;
        if bytes.len() < h + total {
            break h;
        }
        let body = &bytes[h..h + total - 2];
        let crc = u16::from_le_bytes([bytes[h + total - 2], bytes[h + total - 1]]);
        if crc16(body) != crc {
            stats.crc_errors += 1;
            stats.skipped_bytes += 1;
            pos = h + 1;
            continue;
        }
        frames.push(ServoFrame {
            id,
            instruction: bytes[h + PREFIX_LEN],
            params: bytes[h + PREFIX_LEN + 1..h + total - 2].to_vec(),
            crc,
        });
        pos = h + total;
    };
    ParseOutput {
        frames,
        remainder: &bytes[remainder_start..],
        stats,
    }
}

/// Streaming wrapper around [`parse_frames`] that owns the reassembly buffer.
#[derive(Debug, Default)]
pub struct FrameParser {
    buf: Vec<u8>,
    stats: ParseStats,
}

impl FrameParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) -> Vec<ServoFrame> {
        self.buf.extend_from_slice(bytes);
        let out = parse_frames(&self.buf);
        self.stats.crc_errors += out.stats.crc_errors;
        self.stats.skipped_bytes += out.stats.skipped_bytes;
        let consumed = self.buf.len() - out.remainder.len();
        let frames = out.frames;
        self.buf.drain(..consumed);
        frames
    }

    pub fn stats(&self) -> ParseStats {
        self.stats
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn clear(&mut self) {
        self.buf.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_present_position_matches_vendor_example() {
        // READ id 1, address 132, 4 bytes, as printed in the vendor manual.
        let bytes = encode_frame(1, instruction::READ, &[0x84, 0x00, 0x04, 0x00]).unwrap();
        assert_eq!(
            bytes,
            [0xFF, 0xFF, 0xFD, 0x00, 0x01, 0x07, 0x00, 0x02, 0x84, 0x00, 0x04, 0x00, 0x1D, 0x15]
        );
    }

    #[test]
    fn rejects_bad_id_and_oversize() {
        assert_eq!(encode_frame(253, 1, &[]), Err(FrameError::InvalidId(253)));
        assert!(encode_frame(BROADCAST_ID, instruction::SYNC_READ, &[]).is_ok());
        assert_eq!(
            encode_frame(1, 1, &vec![0; MAX_PARAMS + 1]),
            Err(FrameError::Oversize(MAX_PARAMS + 1))
        );
        assert!(encode_frame(1, 1, &vec![0; MAX_PARAMS]).is_ok());
    }

    #[test]
    fn junk_prefix_is_skipped() {
        let frame = encode_frame(3, instruction::STATUS, &[0, 1, 2, 3, 4]).unwrap();
        let mut stream = vec![0x12, 0xFF, 0xFF, 0x00, 0xFD, 0xFF, 0x77];
        stream.extend_from_slice(&frame);
        let out = parse_frames(&stream);
        assert_eq!(out.frames.len(), 1);
        assert_eq!(out.frames[0].id, 3);
        assert_eq!(out.frames[0].params, vec![0, 1, 2, 3, 4]);
        assert!(out.remainder.is_empty());
        assert_eq!(out.stats.skipped_bytes, 7);
    }

    #[test]
    fn flipped_crc_drops_frame() {
        let mut frame = encode_frame(3, instruction::STATUS, &[0, 9, 9]).unwrap();
        let last = frame.len() - 1;
        frame[last] ^= 0xFF;
        let out = parse_frames(&frame);
        assert!(out.frames.is_empty());
        assert_eq!(out.stats.crc_errors, 1);
    }

    #[test]
    fn partial_frame_is_kept() {
        let frame = encode_frame(7, instruction::STATUS, &[0, 1, 2]).unwrap();
        let (a, b) = frame.split_at(5);
        let mut parser = FrameParser::new();
        assert!(parser.push(a).is_empty());
        assert_eq!(parser.buffered(), 5);
        let frames = parser.push(b);
        assert_eq!(frames.len(), 1);
        assert_eq!(parser.buffered(), 0);
    }

    #[test]
    fn trailing_header_prefix_is_kept() {
        let out = parse_frames(&[1, 2, 3, 0xFF, 0xFF]);
        assert_eq!(out.remainder, &[0xFF, 0xFF]);
        let out = parse_frames(&[1, 2, 3, 0xFF, 0xFF, 0xFD]);
        assert_eq!(out.remainder, &[0xFF, 0xFF, 0xFD]);
        let out = parse_frames(&[1, 2, 3]);
        assert!(out.remainder.is_empty());
    }

    #[test]
    fn short_length_field_is_skipped() {
        let mut bytes = HEADER.to_vec();
        bytes.extend_from_slice(&[1, 2, 0]);
        let good = encode_frame(1, instruction::STATUS, &[0]).unwrap();
        bytes.extend_from_slice(&good);
        let out = parse_frames(&bytes);
        assert_eq!(out.frames.len(), 1);
    }
}
