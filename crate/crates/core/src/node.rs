//! Runnable nodes: each wraps per-tick logic around a publisher and a subscriber.
//!
//! * leader: reads the leader arm, runs the control loop against the
//!   follower's reported joints, publishes leader state, commands and safety.
//! * follower-sim: tracks the latest JointCommand and publishes its joints.
//! * recorder: assembles one record per control tick into a session file.
//! * bridge: relays between nodes and console WebSocket clients.
//! * replay: republishes the commands of a recorded session.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::clock::mono_us;
use crate::follower_sim::{FollowerSim, SimError, MAX_DT};
use crate::kinematics::{JointVector, Pose, RobotModel};
use crate::leader_bus::{read_joint_state, BusError, CalibrationMap, LeaderState, ServoBus, Transport};
use crate::protocol::{
    skeleton_json, ConsoleJson, HeartbeatTimer, Message, Payload, Publisher, SessionOp, Subscriber,
    TransportError,
};
use crate::recorder::{session_path, Record, RecorderError, SessionMeta, SessionWriter};
use crate::teleop::{
    step, ArmGeometry, LeaderReading, Phase, SafetyFlags, StepInput, TeleopConfig, TeleopError,
    TeleopState,
};

pub const LEADER_NODE: u8 = 1;
pub const FOLLOWER_NODE: u8 = 2;
pub const RECORDER_NODE: u8 = 3;
pub const BRIDGE_NODE: u8 = 4;
pub const REPLAY_NODE: u8 = 5;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Teleop(#[from] TeleopError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Recorder(#[from] RecorderError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("{0}")]
    Config(String),
}

/// Fixed-rate loop timing on absolute deadlines.
#[derive(Debug)]
pub struct Ticker {
    period: Duration,
    next: Instant,
    pub overruns: u64,
}

impl Ticker {
    pub fn new(rate_hz: f64) -> Self {
        Ticker {
            period: Duration::from_secs_f64(1.0 / rate_hz),
            next: Instant::now(),
            overruns: 0,
        }
    }

    /// Waits for the next deadline. A loop that falls more than one period
    /// behind skips ahead instead of bursting.
    pub fn wait(&mut self) {
        crate::recorder::sleep_until(self.next);
        self.next += self.period;
        let now = Instant::now();
        if now > self.next {
            self.overruns += 1;
            self.next = now + self.period;
        }
    }
}

/// Runs `tick` at `rate_hz` until `stop` is raised or `tick` fails.
pub fn run_at_rate(
    rate_hz: f64,
    stop: &AtomicBool,
    mut tick: impl FnMut(u64) -> Result<(), NodeError>,
) -> Result<u64, NodeError> {
    let mut ticker = Ticker::new(rate_hz);
    while !stop.load(Ordering::Relaxed) {
        ticker.wait();
        tick(mono_us())?;
    }
    if ticker.overruns > 0 {
        log::warn!("{} loop overruns", ticker.overruns);
    }
    Ok(ticker.overruns)
}

/// Elapsed seconds since the previous tick; one nominal period on the first.
fn tick_dt(prev_us: &mut Option<u64>, now_us: u64, nominal: f64) -> f64 {
    let dt = match *prev_us {
        Some(p) if now_us > p => (now_us - p) as f64 / 1e6,
        Some(_) => nominal,
        None => nominal,
    };
    *prev_us = Some(now_us);
    dt
}

pub trait LeaderSource: Send {
    fn read(&mut self) -> Result<LeaderState, BusError>;
    fn dof(&self) -> usize;
    /// Sees every inbound message before the tick's read.
    fn observe(&mut self, _m: &Message, _received_us: u64) {}
}

/// Leader joints supplied over the network, e.g. by console sliders. The
/// sender's heartbeats keep an unchanged pose fresh, so an idle operator
/// does not need to stream joint states.
pub struct RemoteLeader {
    node_id: u8,
    dof: usize,
    q: Option<JointVector>,
    gripper: Option<f64>,
    fresh_us: u64,
}

impl RemoteLeader {
    pub fn new(node_id: u8, dof: usize) -> Self {
        RemoteLeader {
            node_id,
            dof,
            q: None,
            gripper: None,
            fresh_us: 0,
        }
    }
}

impl LeaderSource for RemoteLeader {
    fn read(&mut self) -> Result<LeaderState, BusError> {
        let q = self.q.clone().ok_or_else(|| {
            BusError::Io(std::io::Error::new(
                std::io::ErrorKind::WouldBlock,
                format!("no joint state from node {} yet", self.node_id),
            ))
        })?;
        Ok(LeaderState {
            q,
            gripper: self.gripper,
            t_mono_us: self.fresh_us,
        })
    }

    fn dof(&self) -> usize {
        self.dof
    }

    fn observe(&mut self, m: &Message, received_us: u64) {
        if m.node_id != self.node_id {
            return;
        }
        match &m.payload {
            Payload::JointState(q) if q.len() == self.dof => {
                self.q = JointVector::from_slice(q).ok();
                self.fresh_us = received_us;
            }
            Payload::GripperCommand(g) => self.gripper = Some(*g),
            Payload::Heartbeat => self.fresh_us = self.fresh_us.max(received_us),
            _ => {}
        }
    }
}

/// Leader read through a servo bus, real or emulated.
pub struct BusLeader<T: Transport> {
    pub bus: ServoBus<T>,
    pub calib: CalibrationMap,
}

impl<T: Transport> LeaderSource for BusLeader<T> {
    fn read(&mut self) -> Result<LeaderState, BusError> {
        read_joint_state(&mut self.bus, &self.calib)
    }

    fn dof(&self) -> usize {
        self.calib.dof()
    }
}

#[derive(Debug, Clone)]
pub struct TeleopNodeConfig {
    pub teleop: TeleopConfig,
    pub arm: ArmGeometry,
    pub follower_node: u8,
    /// Second arm at the station and the node publishing its joints.
    pub partner: Option<(ArmGeometry, u8)>,
}

#[derive(Debug, Clone, Default)]
pub struct LeaderStats {
    pub ticks: u64,
    pub commands: u64,
    pub read_errors: u64,
    /// Transitions into the faulted phase.
    pub faults: u64,
    pub last_flags: u32,
    /// Time step and command of every control tick, when logging is on.
    pub command_log: Option<Vec<(f64, JointVector)>>,
}

/// Leader-side control loop.
pub struct LeaderNode<S: LeaderSource> {
    source: S,
    cfg: TeleopNodeConfig,
    state: TeleopState,
    follower_q: Option<Vec<f64>>,
    partner_q: Option<Vec<f64>>,
    leader: Option<LeaderState>,
    prev_us: Option<u64>,
    heartbeat: HeartbeatTimer,
    warned_at: Option<u64>,
    pub stats: LeaderStats,
}

impl<S: LeaderSource> LeaderNode<S> {
    pub fn new(source: S, cfg: TeleopNodeConfig, now_us: u64) -> Result<Self, NodeError> {
        cfg.teleop.validate()?;
        if source.dof() != cfg.arm.model.dof() {
            return Err(NodeError::Config(format!(
                "leader has {} joints but follower model {} has {}",
                source.dof(),
                cfg.arm.model.name(),
                cfg.arm.model.dof()
            )));
        }
        Ok(LeaderNode {
            source,
            cfg,
            state: TeleopState::new(now_us),
            follower_q: None,
            partner_q: None,
            leader: None,
            prev_us: None,
            heartbeat: HeartbeatTimer::default(),
            warned_at: None,
            stats: LeaderStats::default(),
        })
    }

    pub fn log_commands(mut self) -> Self {
        self.stats.command_log = Some(Vec::new());
        self
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    fn dof(&self) -> u8 {
        self.cfg.arm.model.dof() as u8
    }

    pub fn handle(&mut self, m: &Message, now_us: u64) {
        let dof = self.cfg.arm.model.dof();
        match &m.payload {
            Payload::JointState(q) if m.node_id == self.cfg.follower_node && q.len() == dof => {
                self.follower_q = Some(q.clone());
            }
            Payload::JointState(q) => {
                if let Some((partner, id)) = &self.cfg.partner {
                    if m.node_id == *id && q.len() == partner.model.dof() {
                        self.partner_q = Some(q.clone());
                    }
                }
            }
            Payload::SessionControl(SessionOp::ResetFault) => match self.state.reset(now_us) {
                Ok(s) => {
                    log::info!("fault reset by node {}", m.node_id);
                    self.state = s;
                }
                Err(e) => log::info!("ignoring reset: {e}"),
            },
            _ => {}
        }
    }

    pub fn tick(&mut self, publisher: &mut Publisher, inbound: &[Message], now_us: u64) -> Result<(), NodeError> {
        for m in inbound {
            self.source.observe(m, now_us);
            self.handle(m, now_us);
        }
        self.stats.ticks += 1;
        let dof = self.dof();
        match self.source.read() {
            Ok(s) => {
                publisher.publish(dof, s.t_mono_us, Payload::JointState(s.q.to_vec()))?;
                if let Some(g) = s.gripper {
                    publisher.publish(dof, s.t_mono_us, Payload::GripperCommand(g))?;
                }
                self.leader = Some(s);
            }
            Err(e) => {
                self.stats.read_errors += 1;
                if self.warned_at.is_none_or(|t| now_us.saturating_sub(t) > 1_000_000) {
                    log::warn!("leader read failed: {e}");
                    self.warned_at = Some(now_us);
                }
            }
        }
        if self.heartbeat.due(now_us) {
            publisher.heartbeat(dof, now_us)?;
        }
        let Some(follower_q) = self.follower_q.clone() else {
            return Ok(());
        };
        // The bus stamps readings after the tick started.
        let now_us = self.leader.as_ref().map_or(now_us, |l| now_us.max(l.t_mono_us));
        let dt = tick_dt(&mut self.prev_us, now_us, self.cfg.teleop.dt());
        let partner = match (&self.cfg.partner, &self.partner_q) {
            (Some((arm, _)), Some(q)) => Some((arm, q.as_slice())),
            _ => None,
        };
        let input = StepInput {
            leader: self.leader.as_ref().map(|l| LeaderReading {
                q: &l.q,
                t_mono_us: l.t_mono_us,
            }),
            follower_q: &follower_q,
            now_us,
            dt,
        };
        let out = step(&self.state, &input, &self.cfg.teleop, &self.cfg.arm, partner)?;
        if out.state.phase == Phase::Faulted && self.state.phase != Phase::Faulted {
            self.stats.faults += 1;
            log::warn!("faulted: {:?}", out.status.flags());
        }
        let flags = out.status.flags().with_phase(out.state.phase).bits();
        self.stats.last_flags = flags;
        publisher.publish(dof, now_us, Payload::JointCommand(out.command.to_vec()))?;
        publisher.publish(
            dof,
            now_us,
            Payload::Safety {
                flags,
                manipulability: out.status.manipulability,
                min_distance: out.status.min_capsule_distance,
            },
        )?;
        self.stats.commands += 1;
        if let Some(log) = &mut self.stats.command_log {
            log.push((dt, out.command.clone()));
        }
        self.state = out.state;
        Ok(())
    }

    pub fn run(
        mut self,
        publisher: &mut Publisher,
        subscriber: &mut Subscriber,
        stop: &AtomicBool,
    ) -> Result<LeaderStats, NodeError> {
        let rate = self.cfg.teleop.rate_hz;
        run_at_rate(rate, stop, |now| {
            let inbound = subscriber.drain();
            self.tick(publisher, &inbound, now)
        })?;
        Ok(self.stats)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FollowerStats {
    pub ticks: u64,
    pub commands_received: u64,
    /// Decode-time minus send-time of every JointCommand, in µs.
    pub latency_us: Vec<u64>,
    /// Command in force and resulting joints per tick, once commands flow.
    pub tracking_log: Option<Vec<(JointVector, JointVector)>>,
}

/// Simulated follower driven by JointCommand messages.
pub struct FollowerSimNode {
    pub sim: FollowerSim,
    rate_hz: f64,
    command: Option<Vec<f64>>,
    prev_us: Option<u64>,
    heartbeat: HeartbeatTimer,
    pub stats: FollowerStats,
}

impl FollowerSimNode {
    pub fn new(sim: FollowerSim, rate_hz: f64) -> Result<Self, NodeError> {
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(NodeError::Config(format!("rate must be positive, got {rate_hz}")));
        }
        Ok(FollowerSimNode {
            sim,
            rate_hz,
            command: None,
            prev_us: None,
            heartbeat: HeartbeatTimer::default(),
            stats: FollowerStats::default(),
        })
    }

    pub fn log_tracking(mut self) -> Self {
        self.stats.tracking_log = Some(Vec::new());
        self
    }

    pub fn handle(&mut self, m: &Message, received_us: u64) {
        if let Payload::JointCommand(q) = &m.payload {
            if q.len() != self.sim.model.dof() {
                log::warn!("ignoring {}-joint command from node {}", q.len(), m.node_id);
                return;
            }
            self.command = Some(q.clone());
            self.stats.commands_received += 1;
            // Only meaningful when sender and receiver share a clock.
            if received_us >= m.t_mono_us {
                self.stats.latency_us.push(received_us - m.t_mono_us);
            }
        }
    }

    pub fn tick(
        &mut self,
        publisher: &mut Publisher,
        inbound: &[(Message, u64)],
        now_us: u64,
    ) -> Result<(), NodeError> {
        for (m, at) in inbound {
            self.handle(m, *at);
        }
        let dt = tick_dt(&mut self.prev_us, now_us, 1.0 / self.rate_hz).min(MAX_DT);
        if self.stats.ticks > 0 {
            let cmd = self.command.clone().unwrap_or_else(|| self.sim.state.q.to_vec());
            self.sim.step(&cmd, dt)?;
            if let (Some(log), Some(c)) = (&mut self.stats.tracking_log, &self.command) {
                log.push((JointVector::from_slice(c).expect("dof checked"), self.sim.state.q.clone()));
            }
        }
        self.stats.ticks += 1;
        let dof = self.sim.model.dof() as u8;
        publisher.publish(dof, now_us, Payload::JointState(self.sim.state.q.to_vec()))?;
        if self.heartbeat.due(now_us) {
            publisher.heartbeat(dof, now_us)?;
        }
        Ok(())
    }

    pub fn run(
        mut self,
        publisher: &mut Publisher,
        subscriber: &mut Subscriber,
        stop: &AtomicBool,
    ) -> Result<FollowerStats, NodeError> {
        run_at_rate(self.rate_hz, stop, |now| {
            let inbound = subscriber.drain_stamped();
            self.tick(publisher, &inbound, now)
        })?;
        Ok(self.stats)
    }
}

/// Where the recorder puts sessions.
#[derive(Debug, Clone)]
pub enum RecordTarget {
    /// Record into this file from the start until shutdown.
    File(PathBuf),
    /// Wait for start/stop session control and create one file per session.
    Directory(PathBuf),
}

/// Passive subscriber assembling one record per control tick of `leader_node`.
pub struct RecorderNode {
    meta: SessionMeta,
    leader_node: u8,
    follower_node: u8,
    target: RecordTarget,
    writer: Option<(PathBuf, SessionWriter<std::fs::File>)>,
    leader_q: Option<Vec<f64>>,
    cmd_q: Option<Vec<f64>>,
    follower_q: Option<Vec<f64>>,
    gripper: f64,
    last_t: Option<u64>,
    heartbeat: HeartbeatTimer,
    /// Finished sessions with their record counts.
    pub finished: Vec<(PathBuf, u64)>,
}

impl RecorderNode {
    pub fn new(meta: SessionMeta, leader_node: u8, follower_node: u8, target: RecordTarget) -> Result<Self, NodeError> {
        let mut node = RecorderNode {
            meta,
            leader_node,
            follower_node,
            target,
            writer: None,
            leader_q: None,
            cmd_q: None,
            follower_q: None,
            gripper: 0.0,
            last_t: None,
            heartbeat: HeartbeatTimer::default(),
            finished: Vec::new(),
        };
        if let RecordTarget::File(path) = node.target.clone() {
            node.start(path)?;
        }
        Ok(node)
    }

    pub fn is_recording(&self) -> bool {
        self.writer.is_some()
    }

    fn start(&mut self, path: PathBuf) -> Result<(), NodeError> {
        let meta = SessionMeta {
            start_wall_iso8601: SessionMeta::now("", 0, 0.0, 0.0).start_wall_iso8601,
            ..self.meta.clone()
        };
        let w = SessionWriter::create(&path, &meta)?;
        log::info!("recording to {}", path.display());
        self.writer = Some((path, w));
        self.last_t = None;
        Ok(())
    }

    /// Writes the footer of the open session, if any.
    pub fn stop(&mut self) -> Result<Option<(PathBuf, u64)>, NodeError> {
        let Some((path, w)) = self.writer.take() else {
            return Ok(None);
        };
        let count = w.finish()?;
        log::info!("session {} closed with {count} records", path.display());
        self.finished.push((path.clone(), count));
        Ok(Some((path, count)))
    }

    pub fn handle(&mut self, m: &Message) -> Result<(), NodeError> {
        let dof = self.meta.dof;
        match &m.payload {
            Payload::SessionControl(SessionOp::Start) => {
                if let RecordTarget::Directory(dir) = &self.target {
                    if self.writer.is_none() {
                        let path = session_path(dir);
                        self.start(path)?;
                    }
                }
            }
            Payload::SessionControl(SessionOp::Stop) => {
                if matches!(self.target, RecordTarget::Directory(_)) {
                    self.stop()?;
                }
            }
            Payload::JointState(q) if m.node_id == self.leader_node && q.len() == dof => {
                self.leader_q = Some(q.clone());
            }
            Payload::JointState(q) if m.node_id == self.follower_node && q.len() == dof => {
                self.follower_q = Some(q.clone());
            }
            Payload::JointCommand(q) if m.node_id == self.leader_node && q.len() == dof => {
                self.cmd_q = Some(q.clone());
            }
            Payload::GripperCommand(g) if m.node_id == self.leader_node => self.gripper = *g,
            // Safety closes each control tick.
            Payload::Safety { flags, .. } if m.node_id == self.leader_node => {
                self.write_record(m.t_mono_us, *flags)?;
            }
            _ => {}
        }
        Ok(())
    }

    fn write_record(&mut self, t: u64, flags: u32) -> Result<(), NodeError> {
        let Some((_, w)) = &mut self.writer else {
            return Ok(());
        };
        let (Some(l), Some(c), Some(f)) = (&self.leader_q, &self.cmd_q, &self.follower_q) else {
            return Ok(());
        };
        if self.last_t.is_some_and(|p| t <= p) {
            return Ok(());
        }
        let phase = SafetyFlags::from_bits_retain(flags).phase();
        let r = Record {
            t_mono_us: t,
            leader_q: l.clone(),
            cmd_q: c.clone(),
            follower_q: f.clone(),
            gripper: self.gripper,
            safety_flags: flags,
            phase,
        };
        if let Err(e) = w.write(&r) {
            // The writer has closed itself with an aborted marker.
            self.writer = None;
            return Err(e.into());
        }
        self.last_t = Some(t);
        Ok(())
    }

    pub fn run(
        mut self,
        publisher: &mut Publisher,
        subscriber: &mut Subscriber,
        stop: &AtomicBool,
    ) -> Result<Vec<(PathBuf, u64)>, NodeError> {
        let result = (|| {
            while !stop.load(Ordering::Relaxed) {
                if let Some(m) = subscriber.recv_timeout(Duration::from_millis(20)) {
                    self.handle(&m)?;
                }
                let now = mono_us();
                if self.heartbeat.due(now) {
                    publisher.heartbeat(0, now)?;
                }
            }
            Ok::<(), NodeError>(())
        })();
        self.stop()?;
        result?;
        Ok(self.finished)
    }
}

/// Relays node traffic to console clients and console messages to nodes.
pub struct BridgeNode {
    pub ws: crate::protocol::ws::WsBridge,
    model: RobotModel,
    base: Pose,
    follower_node: u8,
    skeleton_seq: u32,
    heartbeat: HeartbeatTimer,
}

impl BridgeNode {
    pub fn new(
        ws: crate::protocol::ws::WsBridge,
        model: RobotModel,
        base: Pose,
        follower_node: u8,
    ) -> Self {
        ws.set_greeting(&[ConsoleJson::model(follower_node, &model)]);
        BridgeNode {
            ws,
            model,
            base,
            follower_node,
            skeleton_seq: 0,
            heartbeat: HeartbeatTimer::default(),
        }
    }

    pub fn relay(&mut self, publisher: &mut Publisher, inbound: &[Message], now_us: u64) -> Result<(), NodeError> {
        for m in inbound {
            self.ws.broadcast_message(m);
            if let Payload::JointState(q) = &m.payload {
                if m.node_id == self.follower_node && q.len() == self.model.dof() {
                    if let Ok(doc) = skeleton_json(m.node_id, self.skeleton_seq, m.t_mono_us, &self.model, &self.base, q) {
                        self.skeleton_seq = self.skeleton_seq.wrapping_add(1);
                        self.ws.broadcast(&doc);
                    }
                }
            }
        }
        while let Some(m) = self.ws.try_recv() {
            publisher.send(&m)?;
        }
        if self.heartbeat.due(now_us) {
            publisher.heartbeat(0, now_us)?;
        }
        Ok(())
    }

    pub fn run(
        mut self,
        publisher: &mut Publisher,
        subscriber: &mut Subscriber,
        stop: &AtomicBool,
    ) -> Result<(), NodeError> {
        while !stop.load(Ordering::Relaxed) {
            let mut inbound = Vec::new();
            if let Some(m) = subscriber.recv_timeout(Duration::from_millis(5)) {
                inbound.push(m);
                inbound.extend(subscriber.drain());
            }
            self.relay(publisher, &inbound, mono_us())?;
        }
        Ok(())
    }
}

/// Publishes a recorded session's commands at `speed` times real time.
pub fn run_replay(
    path: &Path,
    speed: f64,
    publisher: &mut Publisher,
    stop: &AtomicBool,
) -> Result<crate::recorder::ReplayStats, NodeError> {
    let session = crate::recorder::read_session(path)?;
    let dof = session.meta.dof as u8;
    let mut heartbeat = HeartbeatTimer::default();
    let mut failure = None;
    let stats = crate::recorder::replay(&session, speed, Some(stop), |r| {
        let now = mono_us();
        let sent = publisher
            .publish(dof, now, Payload::JointCommand(r.cmd_q.clone()))
            .and_then(|_| {
                if heartbeat.due(now) {
                    publisher.heartbeat(dof, now)?;
                }
                Ok(())
            });
        if let Err(e) = sent {
            failure.get_or_insert(e);
        }
    })?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(stats),
    }
}


pub mod bench {
    //! Same-host loopback: emulated leader bus, control loop and simulated
    //! follower, each on its own thread and talking over TCP.

    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::Arc;
    use std::thread;
    use std::time::Duration;

    use super::*;
    use crate::follower_sim::tracking_error;
    use crate::leader_bus::{BusOptions, Generator, SineChannel, TimedLeader, VirtualBus, VirtualLeader};

    #[derive(Debug, Clone)]
    pub struct BenchConfig {
        pub seconds: f64,
        pub model: RobotModel,
        pub teleop: TeleopConfig,
        /// One channel per joint; the follower starts at the channel centres.
        pub sine: Vec<SineChannel>,
    }

    impl BenchConfig {
        /// Gentle motion about a UR5 working pose.
        pub fn ur5(seconds: f64) -> Result<Self, NodeError> {
            let model = crate::kinematics::builtin::model("ur5").map_err(|e| NodeError::Config(e.to_string()))?;
            let center = [0.0, -1.3, 1.5, -1.8, -1.57, 0.0];
            let amplitude = [0.25, 0.15, 0.2, 0.2, 0.25, 0.3];
            let sine = center
                .iter()
                .zip(amplitude)
                .enumerate()
                .map(|(i, (&c, a))| SineChannel {
                    center: c,
                    amplitude: a,
                    frequency_hz: 0.1 + 0.02 * i as f64,
                    phase: 0.0,
                })
                .collect();
            Ok(BenchConfig {
                seconds,
                model,
                teleop: TeleopConfig::default(),
                sine,
            })
        }
    }

    #[derive(Debug, Clone)]
    pub struct BenchReport {
        pub commands: u64,
        pub faults: u64,
        pub read_errors: u64,
        pub tracking_rms: f64,
        pub tracking_max: f64,
        pub latency_p50_us: u64,
        pub latency_p99_us: u64,
        /// Largest per-tick joint step beyond its velocity budget; ≤ 0 when the bound holds.
        pub max_rate_excess: f64,
        pub last_flags: u32,
    }

    fn percentile(sorted: &[u64], p: f64) -> u64 {
        if sorted.is_empty() {
            return 0;
        }
        sorted[((sorted.len() - 1) as f64 * p).round() as usize]
    }

    pub fn loopback(cfg: &BenchConfig) -> Result<BenchReport, NodeError> {
        let dof = cfg.model.dof();
        if cfg.sine.len() != dof {
            return Err(NodeError::Config(format!("{} sine channels for {dof} joints", cfg.sine.len())));
        }
        let calib = CalibrationMap::uniform(dof, 1, 2048).map_err(|e| NodeError::Config(e.to_string()))?;
        let leader = VirtualLeader::new(calib.clone(), Generator::Sine(cfg.sine.clone()))
            .map_err(|e| NodeError::Config(e.to_string()))?;
        let bus = ServoBus::new(VirtualBus::new(TimedLeader::new(leader)), BusOptions::default());
        let source = BusLeader { bus, calib };

        let arm = cfg.teleop.arm_geometry(ArmGeometry::new(cfg.model.clone()))?;
        let node_cfg = TeleopNodeConfig {
            teleop: cfg.teleop.clone(),
            arm,
            follower_node: FOLLOWER_NODE,
            partner: None,
        };
        let leader_node = LeaderNode::new(source, node_cfg, mono_us())?.log_commands();
        let q0 = JointVector::from_slice(&cfg.sine.iter().map(|c| c.center).collect::<Vec<_>>())
            .map_err(|e| NodeError::Config(e.to_string()))?;
        let sim = FollowerSim::new(cfg.model.clone(), q0, mono_us())?;
        let follower_node = FollowerSimNode::new(sim, cfg.teleop.rate_hz)?.log_tracking();

        let mut leader_sub = Subscriber::bind("127.0.0.1:0")?;
        let mut follower_sub = Subscriber::bind("127.0.0.1:0")?;
        let mut leader_pub = Publisher::new(LEADER_NODE);
        leader_pub.connect(&follower_sub.local_addr().expect("tcp").to_string())?;
        let mut follower_pub = Publisher::new(FOLLOWER_NODE);
        follower_pub.connect(&leader_sub.local_addr().expect("tcp").to_string())?;

        let stop = Arc::new(AtomicBool::new(false));
        let s1 = stop.clone();
        let follower = thread::spawn(move || follower_node.run(&mut follower_pub, &mut follower_sub, &s1));
        let s2 = stop.clone();
        let leader = thread::spawn(move || leader_node.run(&mut leader_pub, &mut leader_sub, &s2));
        thread::sleep(Duration::from_secs_f64(cfg.seconds));
        stop.store(true, Ordering::Relaxed);
        let lstats = leader.join().expect("leader thread")?;
        let fstats = follower.join().expect("follower thread")?;

        let (cmds, qs): (Vec<_>, Vec<_>) = fstats.tracking_log.unwrap_or_default().into_iter().unzip();
        let (tracking_rms, tracking_max) = tracking_error(&cmds, &qs)?;
        let mut lat = fstats.latency_us;
        lat.sort_unstable();
        let budget: Vec<f64> = cfg.model.v_max().iter().map(|v| v * cfg.teleop.v_max_scale).collect();
        let mut max_rate_excess = f64::NEG_INFINITY;
        let log = lstats.command_log.unwrap_or_default();
        for w in log.windows(2) {
            let (dt, cmd) = &w[1];
            for i in 0..dof {
                let excess = (cmd[i] - w[0].1[i]).abs() - budget[i] * dt;
                max_rate_excess = max_rate_excess.max(excess);
            }
        }
        Ok(BenchReport {
            commands: lstats.commands,
            faults: lstats.faults,
            read_errors: lstats.read_errors,
            tracking_rms,
            tracking_max,
            latency_p50_us: percentile(&lat, 0.5),
            latency_p99_us: percentile(&lat, 0.99),
            max_rate_excess,
            last_flags: lstats.last_flags,
        })
    }
}
