//! The leader to follower control loop.
//!
//! Each tick runs unwrap, smoothing, limit clamping, the start-up blend,
//! rate limiting and the safety monitor, in that order. Everything here is a
//! pure function of its inputs so that logged sessions replay bit for bit.

mod collision;
mod filter;
mod safety;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{clamp_to_limits, JointVector, KinematicsError};

pub use collision::{
    builtin_capsules, intra_arm_distance, load_capsules, lowest_point, segment_distance,
    self_collision_distance, ArmGeometry, Capsule, CapsuleSpec,
};
pub use filter::{rate_limit, smooth, sync_blend, unwrap_near};
pub use safety::{safety_check, SafetyFlags, SafetyStatus};

#[derive(Debug, Error)]
pub enum TeleopError {
    #[error("expected {expected} joints, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("dt must be positive and finite, got {0}")]
    InvalidDt(f64),
    #[error("invalid teleop configuration: {0}")]
    Config(String),
    #[error("operator reset is only valid while faulted (phase is {0:?})")]
    NotFaulted(Phase),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopConfig {
    pub rate_hz: f64,
    pub ema_alpha: f64,
    pub sync_ramp_s: f64,
    pub sync_eps_rad: f64,
    /// Fraction of each joint's model velocity limit the loop may use.
    pub v_max_scale: f64,
    pub manip_threshold: f64,
    /// Per-model replacements for `manip_threshold`, keyed by model name.
    pub manip_threshold_overrides: BTreeMap<String, f64>,
    pub limit_margin_rad: f64,
    pub leader_stale_ms: f64,
    pub collision_checking: bool,
    /// Relative paths resolve against the config file's directory.
    pub capsule_file: Option<PathBuf>,
    pub collision_clearance_m: f64,
    /// Table top height in the world frame; enables the table check.
    pub table_z_m: Option<f64>,
    pub singularity_hard_stop: bool,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        TeleopConfig {
            rate_hz: 100.0,
            ema_alpha: 0.8,
            sync_ramp_s: 2.0,
            sync_eps_rad: 0.02,
            v_max_scale: 1.0,
            manip_threshold: 1e-3,
            manip_threshold_overrides: BTreeMap::new(),
            limit_margin_rad: 0.05,
            leader_stale_ms: 200.0,
            collision_checking: true,
            capsule_file: None,
            collision_clearance_m: 0.02,
            table_z_m: None,
            singularity_hard_stop: false,
        }
    }
}

impl TeleopConfig {
    pub fn validate(&self) -> Result<(), TeleopError> {
        let positive = [
            ("rate_hz", self.rate_hz),
            ("sync_ramp_s", self.sync_ramp_s),
            ("sync_eps_rad", self.sync_eps_rad),
            ("manip_threshold", self.manip_threshold),
            ("limit_margin_rad", self.limit_margin_rad),
            ("leader_stale_ms", self.leader_stale_ms),
            ("collision_clearance_m", self.collision_clearance_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TeleopError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(TeleopError::Config(format!(
                "ema_alpha must lie in (0, 1], got {}",
                self.ema_alpha
            )));
        }
        if !(self.v_max_scale > 0.0 && self.v_max_scale <= 1.0) {
            return Err(TeleopError::Config(format!(
                "v_max_scale must lie in (0, 1], got {}",
                self.v_max_scale
            )));
        }
        for (name, v) in &self.manip_threshold_overrides {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(TeleopError::Config(format!(
                    "manip_threshold override for {name} must be positive"
                )));
            }
        }
        if let Some(z) = self.table_z_m {
            if !z.is_finite() {
                return Err(TeleopError::Config("table_z_m must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self, TeleopError> {
        let cfg: TeleopConfig =
            serde_json::from_str(text).map_err(|e| TeleopError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TeleopError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| TeleopError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json_str(&text)?;
        if let (Some(file), Some(dir)) = (&cfg.capsule_file, path.parent()) {
            if file.is_relative() {
                cfg.capsule_file = Some(dir.join(file));
            }
        }
        Ok(cfg)
    }

    pub fn manip_threshold_for(&self, model_name: &str) -> f64 {
        self.manip_threshold_overrides
            .get(model_name)
            .copied()
            .unwrap_or(self.manip_threshold)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }

    /// Attaches capsules to `arm`: the configured file if any, otherwise the
    /// shipped set for the model. Fails if checking is on and neither exists.
    pub fn arm_geometry(&self, arm: ArmGeometry) -> Result<ArmGeometry, TeleopError> {
        let capsules = match &self.capsule_file {
            Some(path) => Some(load_capsules(path)?),
            None => builtin_capsules(arm.model.name()),
        };
        match capsules {
            Some(c) => arm.with_capsules(c),
            None if self.collision_checking => Err(TeleopError::Config(format!(
                "collision checking is enabled but no capsule file is configured for {}",
                arm.model.name()
            ))),
            None => Ok(arm),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Syncing,
    Active,
    Faulted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeleopState {
    pub phase: Phase,
    pub filtered: Option<JointVector>,
    pub last_command: Option<JointVector>,
    pub phase_entered_us: u64,
}

impl TeleopState {
    pub fn new(now_us: u64) -> Self {
        TeleopState {
            phase: Phase::Syncing,
            filtered: None,
            last_command: None,
            phase_entered_us: now_us,
        }
    }

    /// Operator reset: Faulted back to Syncing. The filter restarts from the
    /// next leader reading; the last command is kept so output stays continuous.
    pub fn reset(&self, now_us: u64) -> Result<TeleopState, TeleopError> {
        if self.phase != Phase::Faulted {
            return Err(TeleopError::NotFaulted(self.phase));
        }
        Ok(TeleopState {
            phase: Phase::Syncing,
            filtered: None,
            last_command: self.last_command.clone(),
            phase_entered_us: now_us,
        })
    }

    fn enter(&self, phase: Phase, now_us: u64) -> (Phase, u64) {
        if phase == self.phase {
            (phase, self.phase_entered_us)
        } else {
            (phase, now_us)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LeaderReading<'a> {
    pub q: &'a [f64],
    pub t_mono_us: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    /// Latest leader snapshot, if any has arrived.
    pub leader: Option<LeaderReading<'a>>,
    pub follower_q: &'a [f64],
    pub now_us: u64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub state: TeleopState,
    pub command: JointVector,
    pub status: SafetyStatus,
}

/// Age of the leader snapshot in ms. Before any snapshot the phase start
/// stands in. A timestamp from the future counts as infinitely old.
fn leader_age_ms(state: &TeleopState, input: &StepInput) -> f64 {
    let t = input
        .leader
        .map(|l| l.t_mono_us)
        .unwrap_or(state.phase_entered_us);
    if t > input.now_us {
        log::warn!("leader timestamp {t} is ahead of the loop clock {}", input.now_us);
        return f64::INFINITY;
    }
    (input.now_us - t) as f64 / 1000.0
}

/// One control tick.
pub fn step(
    state: &TeleopState,
    input: &StepInput,
    config: &TeleopConfig,
    follower: &ArmGeometry,
    partner: Option<(&ArmGeometry, &[f64])>,
) -> Result<StepOutput, TeleopError> {
    if !(input.dt > 0.0 && input.dt.is_finite()) {
        return Err(TeleopError::InvalidDt(input.dt));
    }
    let model = &follower.model;
    model.check_dof(input.follower_q)?;

    let (held, _) = match &state.last_command {
        Some(c) => clamp_to_limits(model, c)?,
        None => clamp_to_limits(model, input.follower_q)?,
    };
    let age = leader_age_ms(state, input);

    let hold = |phase: Phase, filtered: Option<JointVector>| -> Result<StepOutput, TeleopError> {
        let status = safety_check(follower, partner, &held, config, age)?;
        let (phase, entered) = state.enter(phase, input.now_us);
        Ok(StepOutput {
            state: TeleopState {
                phase,
                filtered,
                last_command: Some(held.clone()),
                phase_entered_us: entered,
            },
            command: held.clone(),
            status,
        })
    };

    if state.phase == Phase::Faulted {
        return hold(Phase::Faulted, state.filtered.clone());
    }
    let reading = match input.leader {
        Some(r) if age <= config.leader_stale_ms => r,
        // Not stale yet but nothing to follow: hold position.
        None if age <= config.leader_stale_ms => return hold(state.phase, None),
        _ => return hold(Phase::Faulted, state.filtered.clone()),
    };
    model.check_dof(reading.q)?;

    let filtered = match &state.filtered {
        Some(prev) => {
            let unwrapped = unwrap_near(reading.q, prev)?;
            smooth(prev, &unwrapped, config.ema_alpha)?
        }
        None => JointVector::from_slice(reading.q)?,
    };
    let (clamped, _) = clamp_to_limits(model, &filtered)?;

    let mut phase = state.phase;
    let target = if phase == Phase::Syncing {
        let elapsed = input.now_us.saturating_sub(state.phase_entered_us) as f64 * 1e-6;
        let (blend, synced) = sync_blend(input.follower_q, &clamped, elapsed, config)?;
        if synced {
            phase = Phase::Active;
            clamped
        } else {
            // Blending from a pose outside the limits must not leave them.
            clamp_to_limits(model, &blend)?.0
        }
    } else {
        clamped
    };

    let v_max: Vec<f64> = model.v_max().iter().map(|v| v * config.v_max_scale).collect();
    let command = rate_limit(&held, &target, &v_max, input.dt)?;
    let status = safety_check(follower, partner, &command, config, age)?;
    if status.is_fault(config) {
        log::warn!("teleop fault: {:?}", status.flags());
        let (phase, entered) = state.enter(Phase::Faulted, input.now_us);
        return Ok(StepOutput {
            state: TeleopState {
                phase,
                filtered: Some(filtered),
                last_command: Some(held.clone()),
                phase_entered_us: entered,
            },
            command: held,
            status,
        });
    }

    let (phase, entered) = state.enter(phase, input.now_us);
    Ok(StepOutput {
        state: TeleopState {
            phase,
            filtered: Some(filtered),
            last_command: Some(command.clone()),
            phase_entered_us: entered,
        },
        command,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::builtin;

    fn ur5() -> ArmGeometry {
        TeleopConfig::default()
            .arm_geometry(ArmGeometry::new(builtin::model("ur5").unwrap()))
            .unwrap()
    }

    const HOME: [f64; 6] = [0.0, -1.2, 1.4, -1.6, -1.57, 0.0];

    #[test]
    fn config_defaults_and_strictness() {
        let cfg = TeleopConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg, TeleopConfig::default());
        assert!(TeleopConfig::from_json_str(r#"{"rate_hz": 50, "bogus": 1}"#).is_err());
        assert!(TeleopConfig::from_json_str(r#"{"ema_alpha": 1.5}"#).is_err());
        assert!(TeleopConfig::from_json_str(r#"{"sync_ramp_s": 0}"#).is_err());
        let cfg = TeleopConfig::from_json_str(r#"{"manip_threshold_overrides": {"panda": 0.01}}"#)
            .unwrap();
        assert_eq!(cfg.manip_threshold_for("panda"), 0.01);
        assert_eq!(cfg.manip_threshold_for("ur5"), 1e-3);
    }

    #[test]
    fn missing_capsules_is_a_config_error() {
        let cfg = TeleopConfig::default();
        let xarm = ArmGeometry::new(builtin::model("xarm7").unwrap());
        assert!(matches!(cfg.arm_geometry(xarm.clone()), Err(TeleopError::Config(_))));
        let q = builtin::model("xarm7").unwrap().mid_range();
        assert!(matches!(
            safety_check(&xarm, None, &q, &cfg, 0.0),
            Err(TeleopError::Config(_))
        ));
        let off = TeleopConfig {
            collision_checking: false,
            ..TeleopConfig::default()
        };
        assert!(off.arm_geometry(xarm.clone()).is_ok());
        assert!(safety_check(&xarm, None, &q, &off, 0.0).is_ok());
    }

    #[test]
    fn home_pose_is_clear() {
        let cfg = TeleopConfig::default();
        let s = safety_check(&ur5(), None, &HOME, &cfg, 0.0).unwrap();
        assert_eq!(s.flags(), SafetyFlags::empty(), "{s:?}");
        assert!(s.min_capsule_distance > cfg.collision_clearance_m);
    }

    #[test]
    fn joint_near_limit_is_flagged() {
        let arm = ur5();
        let mut q = HOME;
        q[2] = arm.model.q_max()[2] - 0.01;
        let s = safety_check(&arm, None, &q, &TeleopConfig::default(), 0.0).unwrap();
        assert_eq!(s.near_joint_limit, vec![false, false, true, false, false, false]);
    }

    #[test]
    fn phase_flag_round_trip() {
        for p in [Phase::Syncing, Phase::Active, Phase::Faulted] {
            let f = SafetyFlags::LEADER_STALE.with_phase(p);
            assert_eq!(f.phase(), p);
            assert!(f.contains(SafetyFlags::LEADER_STALE));
        }
    }

    #[test]
    fn matched_start_goes_active_on_first_tick() {
        let arm = ur5();
        let cfg = TeleopConfig::default();
        let out = step(
            &TeleopState::new(0),
            &StepInput {
                leader: Some(LeaderReading { q: &HOME, t_mono_us: 0 }),
                follower_q: &HOME,
                now_us: 0,
                dt: 0.01,
            },
            &cfg,
            &arm,
            None,
        )
        .unwrap();
        assert_eq!(out.state.phase, Phase::Active);
        assert!(out.command.max_abs_diff(&JointVector::from_slice(&HOME).unwrap()) < 1e-9);
    }

    #[test]
    fn stale_leader_faults_and_holds() {
        let arm = ur5();
        let cfg = TeleopConfig::default();
        let mut state = TeleopState::new(0);
        let mut last = None;
        for k in 0..40u64 {
            let now = k * 10_000;
            let out = step(
                &state,
                &StepInput {
                    leader: Some(LeaderReading { q: &HOME, t_mono_us: 0 }),
                    follower_q: &HOME,
                    now_us: now,
                    dt: 0.01,
                },
                &cfg,
                &arm,
                None,
            )
            .unwrap();
            if now > 200_000 {
                assert_eq!(out.state.phase, Phase::Faulted);
                assert!(out.status.leader_stale);
            }
            if let Some(prev) = &last {
                if state.phase == Phase::Faulted {
                    assert_eq!(&out.command, prev);
                }
            }
            last = Some(out.command.clone());
            state = out.state;
        }
        assert!(state.reset(400_000).is_ok());
        assert!(TeleopState::new(0).reset(0).is_err());
    }
}
