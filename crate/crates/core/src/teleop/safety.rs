use bitflags::bitflags;
use serde::{Deserialize, Serialize};

use super::collision::{intra_arm_distance, lowest_point, self_collision_distance, ArmGeometry};
use super::{Phase, TeleopConfig, TeleopError};
use crate::kinematics::manipulability;

bitflags! {
    /// Wire form of [`SafetyStatus`] plus the loop phase.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct SafetyFlags: u32 {
        const NEAR_JOINT_LIMIT = 1 << 0;
        const NEAR_SINGULARITY = 1 << 1;
        const SELF_COLLISION = 1 << 2;
        const LEADER_STALE = 1 << 3;
        const ENV_COLLISION = 1 << 4;
        const PHASE_ACTIVE = 1 << 8;
        const PHASE_FAULTED = 1 << 9;
    }
}

impl SafetyFlags {
    pub fn with_phase(self, phase: Phase) -> Self {
        let base = self - (SafetyFlags::PHASE_ACTIVE | SafetyFlags::PHASE_FAULTED);
        match phase {
            Phase::Syncing => base,
            Phase::Active => base | SafetyFlags::PHASE_ACTIVE,
            Phase::Faulted => base | SafetyFlags::PHASE_FAULTED,
        }
    }

    pub fn phase(self) -> Phase {
        if self.contains(SafetyFlags::PHASE_FAULTED) {
            Phase::Faulted
        } else if self.contains(SafetyFlags::PHASE_ACTIVE) {
            Phase::Active
        } else {
            Phase::Syncing
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyStatus {
    pub near_joint_limit: Vec<bool>,
    pub near_singularity: bool,
    pub self_collision_risk: bool,
    pub env_collision_risk: bool,
    pub leader_stale: bool,
    /// Smallest capsule gap in metres; `f64::MAX` when nothing was checked.
    pub min_capsule_distance: f64,
    /// `f64::MAX` for arms with fewer than six joints, where it is undefined.
    pub manipulability: f64,
}

impl SafetyStatus {
    pub fn flags(&self) -> SafetyFlags {
        let mut f = SafetyFlags::empty();
        f.set(SafetyFlags::NEAR_JOINT_LIMIT, self.near_joint_limit.iter().any(|&b| b));
        f.set(SafetyFlags::NEAR_SINGULARITY, self.near_singularity);
        f.set(SafetyFlags::SELF_COLLISION, self.self_collision_risk);
        f.set(SafetyFlags::ENV_COLLISION, self.env_collision_risk);
        f.set(SafetyFlags::LEADER_STALE, self.leader_stale);
        f
    }

    /// Conditions that stop the loop.
    pub fn is_fault(&self, config: &TeleopConfig) -> bool {
        self.self_collision_risk
            || self.env_collision_risk
            || self.leader_stale
            || (config.singularity_hard_stop && self.near_singularity)
    }
}

/// Evaluates every safety condition for a candidate follower command.
///
/// `partner` is the other arm of a bimanual station with its current joints.
pub fn safety_check(
    follower: &ArmGeometry,
    partner: Option<(&ArmGeometry, &[f64])>,
    q_cmd: &[f64],
    config: &TeleopConfig,
    leader_age_ms: f64,
) -> Result<SafetyStatus, TeleopError> {
    let model = &follower.model;
    model.check_dof(q_cmd)?;

    let margin = config.limit_margin_rad;
    let near_joint_limit = q_cmd
        .iter()
        .zip(model.q_min().iter().zip(model.q_max()))
        .map(|(q, (lo, hi))| q - lo < margin || hi - q < margin)
        .collect();

    let (manip, near_singularity) = if model.dof() >= 6 {
        let w = manipulability(model, q_cmd)?;
        (w, w < config.manip_threshold_for(model.name()))
    } else {
        (f64::MAX, false)
    };

    let mut min_distance = f64::MAX;
    let mut env_collision_risk = false;
    if config.collision_checking {
        if follower.capsules.is_empty() {
            return Err(TeleopError::Config(format!(
                "collision checking is enabled but no capsules are loaded for {}",
                model.name()
            )));
        }
        let own = follower.world_capsules(q_cmd)?;
        min_distance = intra_arm_distance(&own);
        if let Some((arm, q)) = partner {
            if arm.capsules.is_empty() {
                return Err(TeleopError::Config(format!(
                    "collision checking is enabled but no capsules are loaded for partner {}",
                    arm.model.name()
                )));
            }
            let other = arm.world_capsules(q)?;
            min_distance = min_distance.min(self_collision_distance(&own, &other));
        }
        if let Some(z) = config.table_z_m {
            env_collision_risk = lowest_point(&own) < z + config.collision_clearance_m;
        }
    }

    Ok(SafetyStatus {
        near_joint_limit,
        near_singularity,
        self_collision_risk: min_distance < config.collision_clearance_m,
        env_collision_risk,
        leader_stale: !(leader_age_ms <= config.leader_stale_ms),
        min_capsule_distance: min_distance,
        manipulability: manip,
    })
}
