//! CRC-16 used by the servo bus and reused by the wire protocol:
//! polynomial 0x8005, initial value 0, no reflection, no final xor.

use crc::{Crc, CRC_16_UMTS};

const DXL: Crc<u16> = Crc::<u16>::new(&CRC_16_UMTS);

pub fn crc16(bytes: &[u8]) -> u16 {
    DXL.checksum(bytes)
}

/// Continues a running CRC over more bytes.
pub fn crc16_update(crc: u16, bytes: &[u8]) -> u16 {
    let mut d = DXL.digest_with_initial(crc);
    d.update(bytes);
    d.finalize()
}
