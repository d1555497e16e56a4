//! First-order servo model standing in for a follower arm.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{builtin, JointVector, KinematicsError, Pose, RobotModel};

pub const MAX_DT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dt must lie in (0, {MAX_DT}], got {0}")]
    InvalidDt(f64),
    #[error("invalid servo dynamics: {0}")]
    InvalidDynamics(String),
    #[error("logs differ in length: {0} commands, {1} states")]
    LengthMismatch(usize, usize),
    #[error("invalid station config: {0}")]
    Station(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoDynamics {
    pub time_constant_s: f64,
    pub v_max: Vec<f64>,
    pub a_max: f64,
}

impl ServoDynamics {
    pub const DEFAULT_TIME_CONSTANT_S: f64 = 0.05;
    pub const DEFAULT_A_MAX: f64 = 20.0;

    pub fn for_model(model: &RobotModel) -> Self {
        ServoDynamics {
            time_constant_s: Self::DEFAULT_TIME_CONSTANT_S,
            v_max: model.v_max().to_vec(),
            a_max: Self::DEFAULT_A_MAX,
        }
    }

    pub fn validate(&self, dof: usize) -> Result<(), SimError> {
        if !(self.time_constant_s > 0.0 && self.time_constant_s.is_finite()) {
            return Err(SimError::InvalidDynamics("time constant must be positive".into()));
        }
        if !(self.a_max > 0.0 && self.a_max.is_finite()) {
            return Err(SimError::InvalidDynamics("a_max must be positive".into()));
        }
        if self.v_max.len() != dof || self.v_max.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(SimError::InvalidDynamics(format!(
                "v_max needs {dof} positive entries"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub q: JointVector,
    pub qd: Vec<f64>,
    pub t_mono_us: u64,
}

impl SimState {
    pub fn at_rest(q: JointVector, t_mono_us: u64) -> Self {
        let qd = vec![0.0; q.dof()];
        SimState { q, qd, t_mono_us }
    }
}

/// Advances the servo model by `dt` seconds toward `cmd`.
pub fn sim_step(
    model: &RobotModel,
    dynamics: &ServoDynamics,
    state: &SimState,
    cmd: &[f64],
    dt: f64,
) -> Result<SimState, SimError> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(SimError::InvalidDt(dt));
    }
    model.check_dof(cmd)?;
    model.check_dof(&state.q)?;
    if let Some(i) = cmd.iter().position(|c| !c.is_finite()) {
        return Err(KinematicsError::NonFinite(i).into());
    }
    let n = model.dof();
    let mut q = Vec::with_capacity(n);
    let mut qd = Vec::with_capacity(n);
    for i in 0..n {
        let v_max = dynamics.v_max[i];
        let dv = dynamics.a_max * dt;
        let desired = ((cmd[i] - state.q[i]) / dynamics.time_constant_s).clamp(-v_max, v_max);
        let mut v = state.qd[i] + (desired - state.qd[i]).clamp(-dv, dv);
        v = v.clamp(-v_max, v_max);
        let mut p = state.q[i] + v * dt;
        let (lo, hi) = (model.q_min()[i], model.q_max()[i]);
        if p < lo || p > hi {
            p = p.clamp(lo, hi);
            v = 0.0;
        }
        q.push(p);
        qd.push(v);
    }
    Ok(SimState {
        q: JointVector::new(q)?,
        qd,
        t_mono_us: state.t_mono_us + (dt * 1e6).round() as u64,
    })
}

/// RMS and maximum over ticks of the per-tick max-abs joint error.
pub fn tracking_error(
    cmd_log: &[JointVector],
    q_log: &[JointVector],
) -> Result<(f64, f64), SimError> {
    if cmd_log.len() != q_log.len() {
        return Err(SimError::LengthMismatch(cmd_log.len(), q_log.len()));
    }
    if cmd_log.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut sum_sq = 0.0;
    let mut max: f64 = 0.0;
    for (c, q) in cmd_log.iter().zip(q_log) {
        if c.dof() != q.dof() {
            return Err(SimError::LengthMismatch(c.dof(), q.dof()));
        }
        let e = c.max_abs_diff(q);
        sum_sq += e * e;
        max = max.max(e);
    }
    Ok(((sum_sq / cmd_log.len() as f64).sqrt(), max))
}

/// A simulated arm with its placement in the world.
#[derive(Debug, Clone)]
pub struct FollowerSim {
    pub model: RobotModel,
    pub dynamics: ServoDynamics,
    pub base: Pose,
    pub state: SimState,
}

impl FollowerSim {
    pub fn new(model: RobotModel, q0: JointVector, t_mono_us: u64) -> Result<Self, SimError> {
        model.check_dof(&q0)?;
        let dynamics = ServoDynamics::for_model(&model);
        Ok(FollowerSim {
            model,
            dynamics,
            base: Pose::identity(),
            state: SimState::at_rest(q0, t_mono_us),
        })
    }

    pub fn with_dynamics(mut self, dynamics: ServoDynamics) -> Result<Self, SimError> {
        dynamics.validate(self.model.dof())?;
        self.dynamics = dynamics;
        Ok(self)
    }

    pub fn step(&mut self, cmd: &[f64], dt: f64) -> Result<&SimState, SimError> {
        self.state = sim_step(&self.model, &self.dynamics, &self.state, cmd, dt)?;
        Ok(&self.state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasePose {
    pub xyz: [f64; 3],
    /// Roll, pitch, yaw in radians.
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl BasePose {
    pub fn pose(&self) -> Pose {
        Pose::from_xyz_rpy(self.xyz, self.rpy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmPlacement {
    pub name: String,
    pub model: String,
    pub base: BasePose,
    /// Starting joints; the model's mid-range when absent.
    #[serde(default)]
    pub q0: Option<Vec<f64>>,
}

/// One or two arms sharing a world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationConfig {
    pub arms: Vec<ArmPlacement>,
}

impl StationConfig {
    pub fn from_json_str(text: &str) -> Result<Self, SimError> {
        let cfg: StationConfig =
            serde_json::from_str(text).map_err(|e| SimError::Station(e.to_string()))?;
        if cfg.arms.is_empty() || cfg.arms.len() > 2 {
            return Err(SimError::Station("expected one or two arms".into()));
        }
        for arm in &cfg.arms {
            if arm.base.xyz.iter().chain(&arm.base.rpy).any(|v| !v.is_finite()) {
                return Err(SimError::Station(format!("{}: non-finite base pose", arm.name)));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Station(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Builds the simulators; model names resolve against the shipped models
    /// first and then as file paths.
    pub fn build(&self, t_mono_us: u64) -> Result<Vec<(String, FollowerSim)>, SimError> {
        self.arms
            .iter()
            .map(|arm| {
                let model = match builtin::model(&arm.model) {
                    Ok(m) => m,
                    Err(KinematicsError::UnknownModel(_)) => RobotModel::load(&arm.model)?,
                    Err(e) => return Err(e.into()),
                };
                let q0 = match &arm.q0 {
                    Some(q) => JointVector::from_slice(q)?,
                    None => model.mid_range(),
                };
                let mut sim = FollowerSim::new(model, q0, t_mono_us)?;
                sim.base = arm.base.pose();
                Ok((arm.name.clone(), sim))
            })
            .collect()
    }
}
