//! The leader device's servo chain: bus framing, calibration from encoder
//! ticks to joint angles, and a virtual leader for running without hardware.

mod bus;
mod calibration;
mod crc;
mod frame;
mod virtual_leader;

pub use bus::{
    read_joint_state, BusError, BusOptions, CaptureTransport, LeaderState, ReadMode,
    SerialTransport, ServoBus, Transport, DEFAULT_BAUD, PRESENT_POSITION_ADDR,
    PRESENT_POSITION_LEN,
};
pub use calibration::{
    radians_to_nearest_ticks, radians_to_ticks, ticks_to_radians, CalibrationEntry,
    CalibrationError, CalibrationMap, EncoderReading, GripperCalibration, RAD_PER_TICK,
    TICKS_PER_REV,
};
pub use crc::{crc16, crc16_update};
pub use frame::{
    encode_frame, instruction, parse_frames, FrameError, FrameParser, ParseOutput, ParseStats,
    ServoFrame, BROADCAST_ID, HEADER, MAX_FRAME_LEN, MAX_PARAMS, MAX_SERVO_ID,
};
pub use virtual_leader::{
    Generator, ScriptError, SineChannel, TickSource, TimedLeader, VirtualBus, VirtualLeader,
    Waypoint, WaypointScript,
};
