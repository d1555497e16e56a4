//! JSON text mapping used on the console WebSocket.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::message::{Message, Payload, ProtocolError, SessionOp};
use crate::kinematics::{forward_kinematics, KinematicsError, Pose, RobotModel};

#[derive(Debug, Error)]
pub enum JsonError {
    #[error("{pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("{0}")]
    Invalid(#[from] ProtocolError),
    #[error("message type `{0}` is sent by the bridge only")]
    Outbound(&'static str),
}

impl JsonError {
    /// JSON pointer of the offending value; empty for whole-document errors.
    pub fn pointer(&self) -> &str {
        match self {
            JsonError::Schema { pointer, .. } => pointer,
            _ => "",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionOpJson {
    Start,
    Stop,
    ResetFault,
}

impl From<SessionOp> for SessionOpJson {
    fn from(op: SessionOp) -> Self {
        match op {
            SessionOp::Start => SessionOpJson::Start,
            SessionOp::Stop => SessionOpJson::Stop,
            SessionOp::ResetFault => SessionOpJson::ResetFault,
        }
    }
}

impl From<SessionOpJson> for SessionOp {
    fn from(op: SessionOpJson) -> Self {
        match op {
            SessionOpJson::Start => SessionOp::Start,
            SessionOpJson::Stop => SessionOp::Stop,
            SessionOpJson::ResetFault => SessionOp::ResetFault,
        }
    }
}

fn is_zero(v: &u8) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointsJson {
    pub node: u8,
    pub seq: u32,
    pub t_us: u64,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyJson {
    pub node: u8,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub dof: u8,
    pub seq: u32,
    pub t_us: u64,
    pub flags: u32,
    pub manipulability: f64,
    pub min_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeartbeatJson {
    pub node: u8,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub dof: u8,
    pub seq: u32,
    pub t_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GripperJson {
    pub node: u8,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub dof: u8,
    pub seq: u32,
    pub t_us: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionJson {
    pub node: u8,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub dof: u8,
    pub seq: u32,
    pub t_us: u64,
    pub op: SessionOpJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelJson {
    pub node: u8,
    pub name: String,
    pub dof: u8,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub v_max: Vec<f64>,
}

/// Orthographic link skeleton: `top` is (x, y), `side` is (x, z), world metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonJson {
    pub node: u8,
    pub seq: u32,
    pub t_us: u64,
    pub top: Vec<[f64; 2]>,
    pub side: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorJson {
    pub pointer: String,
    pub message: String,
}

/// Every document on the console socket, tagged by `type`. Joint messages
/// carry their dof implicitly in `q`; other wire messages carry it only
/// when non-zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConsoleJson {
    JointState(JointsJson),
    JointCommand(JointsJson),
    Safety(SafetyJson),
    Heartbeat(HeartbeatJson),
    GripperCommand(GripperJson),
    SessionControl(SessionJson),
    /// Sent once per connection and arm before any streaming data.
    Model(ModelJson),
    Skeleton(SkeletonJson),
    Error(ErrorJson),
}

impl From<&Message> for ConsoleJson {
    fn from(m: &Message) -> Self {
        let (node, dof, seq, t_us) = (m.node_id, m.dof, m.seq, m.t_mono_us);
        match &m.payload {
            Payload::JointState(q) => ConsoleJson::JointState(JointsJson { node, seq, t_us, q: q.clone() }),
            Payload::JointCommand(q) => ConsoleJson::JointCommand(JointsJson { node, seq, t_us, q: q.clone() }),
            Payload::Safety { flags, manipulability, min_distance } => ConsoleJson::Safety(SafetyJson {
                node,
                dof,
                seq,
                t_us,
                flags: *flags,
                manipulability: *manipulability,
                min_distance: *min_distance,
            }),
            Payload::Heartbeat => ConsoleJson::Heartbeat(HeartbeatJson { node, dof, seq, t_us }),
            Payload::GripperCommand(value) => {
                ConsoleJson::GripperCommand(GripperJson { node, dof, seq, t_us, value: *value })
            }
            Payload::SessionControl(op) => {
                ConsoleJson::SessionControl(SessionJson { node, dof, seq, t_us, op: (*op).into() })
            }
        }
    }
}

impl TryFrom<ConsoleJson> for Message {
    type Error = JsonError;

    fn try_from(j: ConsoleJson) -> Result<Self, JsonError> {
        let joints = |j: JointsJson, command: bool| -> Result<Message, JsonError> {
            if j.q.len() > super::MAX_DOF {
                return Err(ProtocolError::DofTooLarge(j.q.len()).into());
            }
            Ok(Message::joints(j.node, j.seq, j.t_us, command, &j.q))
        };
        let m = match j {
            ConsoleJson::JointState(j) => joints(j, false)?,
            ConsoleJson::JointCommand(j) => joints(j, true)?,
            ConsoleJson::Safety(s) => Message {
                node_id: s.node,
                dof: s.dof,
                seq: s.seq,
                t_mono_us: s.t_us,
                payload: Payload::Safety {
                    flags: s.flags,
                    manipulability: s.manipulability,
                    min_distance: s.min_distance,
                },
            },
            ConsoleJson::Heartbeat(h) => Message {
                node_id: h.node,
                dof: h.dof,
                seq: h.seq,
                t_mono_us: h.t_us,
                payload: Payload::Heartbeat,
            },
            ConsoleJson::GripperCommand(g) => Message {
                node_id: g.node,
                dof: g.dof,
                seq: g.seq,
                t_mono_us: g.t_us,
                payload: Payload::GripperCommand(g.value),
            },
            ConsoleJson::SessionControl(s) => Message {
                node_id: s.node,
                dof: s.dof,
                seq: s.seq,
                t_mono_us: s.t_us,
                payload: Payload::SessionControl(s.op.into()),
            },
            ConsoleJson::Model(_) => return Err(JsonError::Outbound("model")),
            ConsoleJson::Skeleton(_) => return Err(JsonError::Outbound("skeleton")),
            ConsoleJson::Error(_) => return Err(JsonError::Outbound("error")),
        };
        m.validate()?;
        Ok(m)
    }
}

fn schema(pointer: impl Into<String>, message: impl Into<String>) -> JsonError {
    JsonError::Schema {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn body<T: serde::de::DeserializeOwned>(
    v: serde_json::Map<String, serde_json::Value>,
) -> Result<T, JsonError> {
    serde_path_to_error::deserialize(serde_json::Value::Object(v))
        .map_err(|e| schema(json_pointer(e.path()), e.inner().to_string()))
}

impl ConsoleJson {
    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("console JSON is always serialisable")
    }

    /// Strict parse; errors carry the JSON pointer of the offending value.
    pub fn parse(text: &str) -> Result<Self, JsonError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| schema("", e.to_string()))?;
        let serde_json::Value::Object(mut map) = value else {
            return Err(schema("", "expected a JSON object"));
        };
        let tag = match map.remove("type") {
            Some(serde_json::Value::String(s)) => s,
            Some(_) => return Err(schema("/type", "expected a string")),
            None => return Err(schema("", "missing field `type`")),
        };
        Ok(match tag.as_str() {
            "joint_state" => ConsoleJson::JointState(body(map)?),
            "joint_command" => ConsoleJson::JointCommand(body(map)?),
            "safety" => ConsoleJson::Safety(body(map)?),
            "heartbeat" => ConsoleJson::Heartbeat(body(map)?),
            "gripper_command" => ConsoleJson::GripperCommand(body(map)?),
            "session_control" => ConsoleJson::SessionControl(body(map)?),
            "model" => ConsoleJson::Model(body(map)?),
            "skeleton" => ConsoleJson::Skeleton(body(map)?),
            "error" => ConsoleJson::Error(body(map)?),
            other => return Err(schema("/type", format!("unknown message type `{other}`"))),
        })
    }

    pub fn model(node: u8, model: &RobotModel) -> Self {
        ConsoleJson::Model(ModelJson {
            node,
            name: model.name().to_string(),
            dof: model.dof() as u8,
            q_min: model.q_min().to_vec(),
            q_max: model.q_max().to_vec(),
            v_max: model.v_max().to_vec(),
        })
    }

    pub fn error(e: &JsonError) -> Self {
        ConsoleJson::Error(ErrorJson {
            pointer: e.pointer().to_string(),
            message: e.to_string(),
        })
    }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => {
                out.push('/');
                out.push_str(&key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Enum { .. } | Segment::Unknown => {}
        }
    }
    out
}

pub fn message_to_json(m: &Message) -> String {
    ConsoleJson::from(m).to_text()
}

pub fn json_to_message(text: &str) -> Result<Message, JsonError> {
    ConsoleJson::parse(text)?.try_into()
}

/// World-frame polyline through each joint frame, including the elbow
/// points introduced by link offsets.
pub fn skeleton_points(
    model: &RobotModel,
    base: &Pose,
    q: &[f64],
) -> Result<Vec<Vector3<f64>>, KinematicsError> {
    let fk = forward_kinematics(model, q)?;
    let mut pts = vec![base.position];
    for (frame, dh) in fk.frames[1..].iter().zip(model.dh()) {
        let world = base.compose(frame);
        if dh.a.abs() > 0.0 {
            pts.push(world.transform_point(&Vector3::new(-dh.a, 0.0, 0.0)));
        }
        pts.push(world.position);
    }
    Ok(pts)
}

pub fn skeleton_json(
    node: u8,
    seq: u32,
    t_us: u64,
    model: &RobotModel,
    base: &Pose,
    q: &[f64],
) -> Result<ConsoleJson, KinematicsError> {
    let pts = skeleton_points(model, base, q)?;
    Ok(ConsoleJson::Skeleton(SkeletonJson {
        node,
        seq,
        t_us,
        top: pts.iter().map(|p| [p.x, p.y]).collect(),
        side: pts.iter().map(|p| [p.x, p.z]).collect(),
    }))
}
