//! Mapping from raw encoder ticks to leader joint angles.

use std::collections::HashSet;
use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Encoder counts per motor revolution (12-bit).
pub const TICKS_PER_REV: f64 = 4096.0;
/// Angular size of one encoder count.
pub const RAD_PER_TICK: f64 = TAU / TICKS_PER_REV;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no calibration entry for servo id {0}")]
    UnknownServo(u8),
    #[error("invalid calibration: {0}")]
    Invalid(String),
    #[error("failed to parse calibration: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Raw position sample from one servo.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderReading {
    pub servo_id: u8,
    /// Raw counts; may lie outside one turn.
    pub ticks: i32,
    pub t_mono_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationEntry {
    pub joint_index: usize,
    pub servo_id: u8,
    pub sign: i8,
    pub offset_ticks: i32,
}

/// Optional trigger channel, normalised so `open_ticks` maps to 0 and
/// `closed_ticks` to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GripperCalibration {
    pub servo_id: u8,
    pub open_ticks: i32,
    pub closed_ticks: i32,
}

impl GripperCalibration {
    pub fn normalize(&self, ticks: i32) -> f64 {
        let span = (self.closed_ticks - self.open_ticks) as f64;
        ((ticks - self.open_ticks) as f64 / span).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CalibrationFile", into = "CalibrationFile")]
pub struct CalibrationMap {
    /// Sorted by `joint_index`, which runs 0..dof.
    joints: Vec<CalibrationEntry>,
    gripper: Option<GripperCalibration>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationFile {
    joints: Vec<CalibrationEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gripper: Option<GripperCalibration>,
}

impl TryFrom<CalibrationFile> for CalibrationMap {
    type Error = CalibrationError;

    fn try_from(f: CalibrationFile) -> Result<Self, Self::Error> {
        CalibrationMap::new(f.joints, f.gripper)
    }
}

impl From<CalibrationMap> for CalibrationFile {
    fn from(c: CalibrationMap) -> Self {
        CalibrationFile {
            joints: c.joints,
            gripper: c.gripper,
        }
    }
}

impl CalibrationMap {
    pub fn new(
        mut joints: Vec<CalibrationEntry>,
        gripper: Option<GripperCalibration>,
    ) -> Result<Self, CalibrationError> {
        if joints.is_empty() {
            return Err(CalibrationError::Invalid("no joints".into()));
        }
        joints.sort_by_key(|e| e.joint_index);
        let mut ids = HashSet::new();
        for (i, e) in joints.iter().enumerate() {
            if e.joint_index != i {
                return Err(CalibrationError::Invalid(format!(
                    "joint indices must be 0..{} without gaps or repeats",
                    joints.len()
                )));
            }
            if e.sign != 1 && e.sign != -1 {
                return Err(CalibrationError::Invalid(format!(
                    "joint {i}: sign must be +1 or -1"
                )));
            }
            if !(0..4096).contains(&e.offset_ticks) {
                return Err(CalibrationError::Invalid(format!(
                    "joint {i}: offset_ticks {} outside [0, 4095]",
                    e.offset_ticks
                )));
            }
            if !ids.insert(e.servo_id) {
                return Err(CalibrationError::Invalid(format!(
                    "servo id {} used twice",
                    e.servo_id
                )));
            }
        }
        if let Some(g) = &gripper {
            if !ids.insert(g.servo_id) {
                return Err(CalibrationError::Invalid(format!(
                    "gripper servo id {} collides with a joint",
                    g.servo_id
                )));
            }
            if g.open_ticks == g.closed_ticks {
                return Err(CalibrationError::Invalid(
                    "gripper open and closed ticks are equal".into(),
                ));
            }
        }
        Ok(CalibrationMap { joints, gripper })
    }

    /// Identity-sign calibration for servo ids `first_id..first_id+dof`.
    pub fn uniform(dof: usize, first_id: u8, offset_ticks: i32) -> Result<Self, CalibrationError> {
        let joints = (0..dof)
            .map(|i| CalibrationEntry {
                joint_index: i,
                servo_id: first_id + i as u8,
                sign: 1,
                offset_ticks,
            })
            .collect();
        Self::new(joints, None)
    }

    /// Offsets that make `ticks` read as `pose`. Each offset is reduced to one
    /// turn, so the calibrated angle can differ from `pose` by whole turns.
    pub fn from_known_pose(
        servo_ids: &[u8],
        signs: &[i8],
        ticks: &[i32],
        pose: &[f64],
    ) -> Result<Self, CalibrationError> {
        let n = servo_ids.len();
        if signs.len() != n || ticks.len() != n || pose.len() != n {
            return Err(CalibrationError::Invalid(
                "ids, signs, ticks and pose must have the same length".into(),
            ));
        }
        let mut joints = Vec::with_capacity(n);
        for i in 0..n {
            if !pose[i].is_finite() {
                return Err(CalibrationError::Invalid(format!("joint {i}: pose is not finite")));
            }
            let steps = (pose[i] / RAD_PER_TICK).round() as i64;
            let offset = (ticks[i] as i64 - signs[i] as i64 * steps).rem_euclid(TICKS_PER_REV as i64);
            joints.push(CalibrationEntry {
                joint_index: i,
                servo_id: servo_ids[i],
                sign: signs[i],
                offset_ticks: offset as i32,
            });
        }
        Self::new(joints, None)
    }

    pub fn from_json_str(text: &str) -> Result<Self, CalibrationError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CalibrationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[CalibrationEntry] {
        &self.joints
    }

    pub fn gripper(&self) -> Option<&GripperCalibration> {
        self.gripper.as_ref()
    }

    pub fn with_gripper(mut self, gripper: GripperCalibration) -> Result<Self, CalibrationError> {
        let joints = std::mem::take(&mut self.joints);
        Self::new(joints, Some(gripper))
    }

    /// Joint servo ids in joint order, followed by the gripper id if any.
    pub fn servo_ids(&self) -> Vec<u8> {
        self.joints
            .iter()
            .map(|e| e.servo_id)
            .chain(self.gripper.map(|g| g.servo_id))
            .collect()
    }

    pub fn entry(&self, servo_id: u8) -> Result<&CalibrationEntry, CalibrationError> {
        self.joints
            .iter()
            .find(|e| e.servo_id == servo_id)
            .ok_or(CalibrationError::UnknownServo(servo_id))
    }

    pub fn to_radians(&self, reading: &EncoderReading) -> Result<f64, CalibrationError> {
        Ok(ticks_to_radians(reading, self.entry(reading.servo_id)?))
    }
}

/// `sign · (ticks − offset) · 2π/4096`, with no wrapping.
pub fn ticks_to_radians(reading: &EncoderReading, entry: &CalibrationEntry) -> f64 {
    entry.sign as f64 * (reading.ticks - entry.offset_ticks) as f64 * RAD_PER_TICK
}

/// Inverse of [`ticks_to_radians`] before rounding to whole counts.
pub fn radians_to_ticks(radians: f64, entry: &CalibrationEntry) -> f64 {
    entry.offset_ticks as f64 + entry.sign as f64 * radians / RAD_PER_TICK
}

/// Nearest whole encoder count for a joint angle.
pub fn radians_to_nearest_ticks(radians: f64, entry: &CalibrationEntry) -> i32 {
    entry.offset_ticks + entry.sign as i32 * (radians / RAD_PER_TICK).round() as i32
}
