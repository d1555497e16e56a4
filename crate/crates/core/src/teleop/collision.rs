//! Capsule proxies for link geometry and the distances between them.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::TeleopError;
use crate::kinematics::{forward_kinematics, Pose, RobotModel};

/// Capsule attached to a DH frame (`link_index` 0 is the base frame,
/// `i` the frame after joint `i`), endpoints in that frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleSpec {
    pub link_index: usize,
    pub p0: [f64; 3],
    pub p1: [f64; 3],
    pub radius: f64,
}

pub fn load_capsules(path: impl AsRef<Path>) -> Result<Vec<CapsuleSpec>, TeleopError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        TeleopError::Config(format!("capsule file {}: {e}", path.display()))
    })?;
    let caps: Vec<CapsuleSpec> = serde_json::from_str(&text)
        .map_err(|e| TeleopError::Config(format!("capsule file {}: {e}", path.display())))?;
    if let Some(c) = caps.iter().find(|c| !(c.radius >= 0.0 && c.radius.is_finite())) {
        return Err(TeleopError::Config(format!(
            "capsule on link {} has an invalid radius",
            c.link_index
        )));
    }
    Ok(caps)
}

/// Capsule sets shipped with the repository, by model name.
pub fn builtin_capsules(model_name: &str) -> Option<Vec<CapsuleSpec>> {
    let text = match model_name {
        "ur5" => include_str!("../../../../models/ur5_capsules.json"),
        _ => return None,
    };
    Some(serde_json::from_str(text).expect("shipped capsules parse"))
}

/// Capsule in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub link_index: usize,
    pub p0: Vector3<f64>,
    pub p1: Vector3<f64>,
    pub radius: f64,
}

/// One arm placed in the shared world frame.
#[derive(Debug, Clone)]
pub struct ArmGeometry {
    pub model: RobotModel,
    /// Base frame in world coordinates.
    pub base: Pose,
    pub capsules: Vec<CapsuleSpec>,
}

impl ArmGeometry {
    pub fn new(model: RobotModel) -> Self {
        ArmGeometry {
            model,
            base: Pose::identity(),
            capsules: Vec::new(),
        }
    }

    pub fn with_base(mut self, base: Pose) -> Self {
        self.base = base;
        self
    }

    pub fn with_capsules(mut self, capsules: Vec<CapsuleSpec>) -> Result<Self, TeleopError> {
        if let Some(c) = capsules.iter().find(|c| c.link_index > self.model.dof()) {
            return Err(TeleopError::Config(format!(
                "capsule link_index {} exceeds {} frames",
                c.link_index,
                self.model.dof()
            )));
        }
        self.capsules = capsules;
        Ok(self)
    }

    pub fn world_capsules(&self, q: &[f64]) -> Result<Vec<Capsule>, TeleopError> {
        let fk = forward_kinematics(&self.model, q)?;
        Ok(self
            .capsules
            .iter()
            .map(|c| {
                let frame = self.base.compose(&fk.frames[c.link_index]);
                Capsule {
                    link_index: c.link_index,
                    p0: frame.transform_point(&Vector3::from(c.p0)),
                    p1: frame.transform_point(&Vector3::from(c.p1)),
                    radius: c.radius,
                }
            })
            .collect())
    }
}

/// Closest distance between segments `[p0, p1]` and `[q0, q1]`.
pub fn segment_distance(
    p0: &Vector3<f64>,
    p1: &Vector3<f64>,
    q0: &Vector3<f64>,
    q1: &Vector3<f64>,
) -> f64 {
    const EPS: f64 = 1e-12;
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let (s, t) = if a <= EPS && e <= EPS {
        (0.0, 0.0)
    } else if a <= EPS {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e <= EPS {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s = if denom > EPS * a * e {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    ((p0 + d1 * s) - (q0 + d2 * t)).norm()
}

fn capsule_gap(a: &Capsule, b: &Capsule) -> f64 {
    (segment_distance(&a.p0, &a.p1, &b.p0, &b.p1) - a.radius - b.radius).max(0.0)
}

/// Smallest surface gap over all pairs drawn from `a` × `b`, clamped at 0.
/// `f64::MAX` when either list is empty.
pub fn self_collision_distance(a: &[Capsule], b: &[Capsule]) -> f64 {
    let mut best = f64::MAX;
    for ca in a {
        for cb in b {
            best = best.min(capsule_gap(ca, cb));
        }
    }
    best
}

/// Smallest gap between capsules of one arm, skipping pairs on the same or
/// adjacent links.
pub fn intra_arm_distance(caps: &[Capsule]) -> f64 {
    let mut best = f64::MAX;
    for (i, a) in caps.iter().enumerate() {
        for b in &caps[i + 1..] {
            if a.link_index.abs_diff(b.link_index) <= 1 {
                continue;
            }
            best = best.min(capsule_gap(a, b));
        }
    }
    best
}

/// Height of the lowest capsule surface point, ignoring the base and first
/// link which are mounted on the table.
pub fn lowest_point(caps: &[Capsule]) -> f64 {
    caps.iter()
        .filter(|c| c.link_index >= 2)
        .map(|c| c.p0.z.min(c.p1.z) - c.radius)
        .fold(f64::MAX, f64::min)
}
