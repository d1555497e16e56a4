//! Framed wire protocol between nodes and the JSON mapping for the console.

mod json;
mod message;
mod transport;
pub mod ws;

pub use json::{
    json_to_message, message_to_json, skeleton_json, skeleton_points, ConsoleJson, ErrorJson,
    GripperJson, HeartbeatJson, JointsJson, JsonError, ModelJson, SafetyJson, SessionJson,
    SessionOpJson, SkeletonJson,
};
pub use message::{
    decode_messages, encode_message, staleness_check, DecodeOutput, DecodeStats, Message, MsgType,
    Payload, ProtocolError, SeqEvent, SeqTracker, SessionOp, StreamDecoder, MAGIC, MAX_BODY_LEN,
    MAX_DOF, MAX_MESSAGE_LEN, VERSION,
};
pub use transport::{
    HeartbeatTimer, NodeEntry, Publisher, Subscriber, Topology, TransportError,
    HEARTBEAT_PERIOD_US,
};
