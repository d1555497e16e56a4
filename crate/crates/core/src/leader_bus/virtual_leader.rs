//! Hardware-free leader: synthetic encoder ticks and an emulated servo chain
//! that answers bus requests with them.

use std::collections::{HashMap, HashSet, VecDeque};
use std::f64::consts::TAU;
use std::io;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::bus::{Transport, PRESENT_POSITION_ADDR};
use super::calibration::{radians_to_nearest_ticks, CalibrationMap, EncoderReading};
use super::frame::{encode_frame, instruction, FrameParser, BROADCAST_ID};

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("invalid waypoint script: {0}")]
    Invalid(String),
    #[error("failed to parse waypoint script: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Per-joint sinusoid around `center` (rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineChannel {
    #[serde(default)]
    pub center: f64,
    pub amplitude: f64,
    pub frequency_hz: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    pub q: Vec<f64>,
}

/// Joint waypoints with linear interpolation in between. Queries outside the
/// scripted span hold the nearest end waypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScriptFile", into = "ScriptFile")]
pub struct WaypointScript {
    waypoints: Vec<Waypoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    waypoints: Vec<Waypoint>,
}

impl TryFrom<ScriptFile> for WaypointScript {
    type Error = ScriptError;
    fn try_from(f: ScriptFile) -> Result<Self, ScriptError> {
        WaypointScript::new(f.waypoints)
    }
}

impl From<WaypointScript> for ScriptFile {
    fn from(s: WaypointScript) -> Self {
        ScriptFile {
            waypoints: s.waypoints,
        }
    }
}

impl WaypointScript {
    pub fn new(waypoints: Vec<Waypoint>) -> Result<Self, ScriptError> {
        let Some(first) = waypoints.first() else {
            return Err(ScriptError::Invalid("no waypoints".into()));
        };
        let dof = first.q.len();
        for (i, w) in waypoints.iter().enumerate() {
            if w.q.len() != dof {
                return Err(ScriptError::Invalid(format!(
                    "waypoint {i} has {} joints, expected {dof}",
                    w.q.len()
                )));
            }
            if !w.t.is_finite() || w.q.iter().any(|v| !v.is_finite()) {
                return Err(ScriptError::Invalid(format!("waypoint {i} is not finite")));
            }
            if i > 0 && w.t <= waypoints[i - 1].t {
                return Err(ScriptError::Invalid(format!(
                    "waypoint {i}: times must strictly increase"
                )));
            }
        }
        Ok(WaypointScript { waypoints })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScriptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn dof(&self) -> usize {
        self.waypoints[0].q.len()
    }

    pub fn duration(&self) -> f64 {
        self.waypoints.last().unwrap().t - self.waypoints[0].t
    }

    pub fn sample(&self, t: f64) -> Vec<f64> {
        let w = &self.waypoints;
        if t <= w[0].t {
            return w[0].q.clone();
        }
        let last = w.last().unwrap();
        if t >= last.t {
            return last.q.clone();
        }
        let k = w.partition_point(|p| p.t <= t);
        let (a, b) = (&w[k - 1], &w[k]);
        let s = (t - a.t) / (b.t - a.t);
        a.q.iter().zip(&b.q).map(|(x, y)| x + s * (y - x)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    Sine(Vec<SineChannel>),
    Script(WaypointScript),
}

impl Generator {
    /// Commanded joint angles at time `t` (s).
    pub fn joint_angles(&self, t: f64) -> Vec<f64> {
        match self {
            Generator::Sine(channels) => channels
                .iter()
                .map(|c| c.center + c.amplitude * (TAU * c.frequency_hz * t + c.phase).sin())
                .collect(),
            Generator::Script(script) => script.sample(t),
        }
    }

    pub fn dof(&self) -> usize {
        match self {
            Generator::Sine(c) => c.len(),
            Generator::Script(s) => s.dof(),
        }
    }
}

/// Synthetic leader producing raw ticks through a calibration.
#[derive(Debug, Clone)]
pub struct VirtualLeader {
    calib: CalibrationMap,
    generator: Generator,
    gripper: f64,
}

impl VirtualLeader {
    pub fn new(calib: CalibrationMap, generator: Generator) -> Result<Self, ScriptError> {
        if generator.dof() != calib.dof() {
            return Err(ScriptError::Invalid(format!(
                "generator drives {} joints but calibration has {}",
                generator.dof(),
                calib.dof()
            )));
        }
        Ok(VirtualLeader {
            calib,
            generator,
            gripper: 0.0,
        })
    }

    pub fn calibration(&self) -> &CalibrationMap {
        &self.calib
    }

    pub fn set_gripper(&mut self, value: f64) {
        self.gripper = value.clamp(0.0, 1.0);
    }

    /// Raw readings for time `t` (s), one per calibrated servo.
    ///
    /// Sinusoid channels map to `offset + sign·round((center + A·sin(2πft + φ))·4096/2π)`.
    pub fn step(&self, t: f64, t_mono_us: u64) -> Vec<EncoderReading> {
        let q = self.generator.joint_angles(t);
        let mut out: Vec<EncoderReading> = self
            .calib
            .joints()
            .iter()
            .zip(&q)
            .map(|(e, &angle)| EncoderReading {
                servo_id: e.servo_id,
                ticks: radians_to_nearest_ticks(angle, e),
                t_mono_us,
            })
            .collect();
        if let Some(g) = self.calib.gripper() {
            let span = (g.closed_ticks - g.open_ticks) as f64;
            out.push(EncoderReading {
                servo_id: g.servo_id,
                ticks: g.open_ticks + (self.gripper * span).round() as i32,
                t_mono_us,
            });
        }
        out
    }
}

/// Supplies the ticks an emulated servo reports; `None` means the servo
/// stays silent.
pub trait TickSource: Send {
    fn ticks(&mut self, servo_id: u8) -> Option<i32>;
}

impl TickSource for HashMap<u8, i32> {
    fn ticks(&mut self, servo_id: u8) -> Option<i32> {
        self.get(&servo_id).copied()
    }
}

/// A [`VirtualLeader`] sampled against wall-clock time since creation.
pub struct TimedLeader {
    leader: VirtualLeader,
    start: Instant,
    cache: Option<(Instant, HashMap<u8, i32>)>,
}

impl TimedLeader {
    pub fn new(leader: VirtualLeader) -> Self {
        TimedLeader {
            leader,
            start: Instant::now(),
            cache: None,
        }
    }
}

impl TickSource for TimedLeader {
    fn ticks(&mut self, servo_id: u8) -> Option<i32> {
        let now = Instant::now();
        // One snapshot per request burst so all joints share a sample time.
        let fresh = matches!(&self.cache, Some((at, _)) if now.duration_since(*at) < Duration::from_micros(500));
        if !fresh {
            let t = now.duration_since(self.start).as_secs_f64();
            let map = self
                .leader
                .step(t, 0)
                .into_iter()
                .map(|r| (r.servo_id, r.ticks))
                .collect();
            self.cache = Some((now, map));
        }
        self.cache.as_ref().and_then(|(_, m)| m.get(&servo_id).copied())
    }
}

/// Emulated servo chain: answers READ and SYNC_READ of the present-position
/// register with status packets built from a [`TickSource`].
pub struct VirtualBus<S: TickSource> {
    source: S,
    silent: HashSet<u8>,
    parser: FrameParser,
    pending: VecDeque<u8>,
}

impl<S: TickSource> VirtualBus<S> {
    pub fn new(source: S) -> Self {
        VirtualBus {
            source,
            silent: HashSet::new(),
            parser: FrameParser::new(),
            pending: VecDeque::new(),
        }
    }

    /// Marks a servo as unresponsive.
    pub fn silence(&mut self, servo_id: u8) {
        self.silent.insert(servo_id);
    }

    pub fn source_mut(&mut self) -> &mut S {
        &mut self.source
    }

    fn respond(&mut self, id: u8, address: u16, len: u16) {
        if self.silent.contains(&id) || address != PRESENT_POSITION_ADDR || len != 4 {
            return;
        }
        let Some(ticks) = self.source.ticks(id) else {
            return;
        };
        let mut params = vec![0u8];
        params.extend_from_slice(&ticks.to_le_bytes());
        let bytes = encode_frame(id, instruction::STATUS, &params).expect("valid status");
        self.pending.extend(bytes);
    }
}

impl<S: TickSource> Transport for VirtualBus<S> {
    fn write_all(&mut self, bytes: &[u8]) -> io::Result<()> {
        for frame in self.parser.push(bytes) {
            if frame.params.len() < 4 {
                continue;
            }
            let address = u16::from_le_bytes([frame.params[0], frame.params[1]]);
            let len = u16::from_le_bytes([frame.params[2], frame.params[3]]);
            match (frame.id, frame.instruction) {
                (BROADCAST_ID, instruction::SYNC_READ) => {
                    for &id in &frame.params[4..] {
                        self.respond(id, address, len);
                    }
                }
                (id, instruction::READ) => self.respond(id, address, len),
                _ => {}
            }
        }
        Ok(())
    }

    fn read(&mut self, buf: &mut [u8], timeout: Duration) -> io::Result<usize> {
        if self.pending.is_empty() {
            std::thread::sleep(timeout.min(Duration::from_micros(500)));
            return Ok(0);
        }
        let n = buf.len().min(self.pending.len());
        for (dst, src) in buf.iter_mut().zip(self.pending.drain(..n)) {
            *dst = src;
        }
        Ok(n)
    }

    fn clear_input(&mut self) -> io::Result<()> {
        self.pending.clear();
        Ok(())
    }
}
