//! Denavit–Hartenberg robot models and the kinematic quantities the teleop
//! stack needs: forward kinematics, the geometric Jacobian, manipulability,
//! uniform length scaling and joint-limit clamping.
//!
//! Transforms follow the standard (distal) convention:
//! `Rot_z(θ + θ_offset) · Trans_z(d) · Trans_x(a) · Rot_x(alpha)`.
//! Angles are never wrapped here.

use std::fmt;
use std::ops::Deref;
use std::path::Path;

use nalgebra::{Dyn, Matrix3, Matrix3xX, Matrix4, OMatrix, Vector3, U6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 6×dof geometric Jacobian: linear rows on top, angular rows below.
pub type Jacobian = OMatrix<f64, U6, Dyn>;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("expected {expected} joint values, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite joint value at index {0}")]
    NonFinite(usize),
    #[error("manipulability needs at least 6 joints, model has {0}")]
    UnsupportedModel(usize),
    #[error("scale factor must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
    #[error("unknown built-in model `{0}`")]
    UnknownModel(String),
    #[error("failed to parse robot model: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One row of a DH table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DhParameter {
    /// Link length along x (m).
    pub a: f64,
    /// Link offset along z (m).
    pub d: f64,
    /// Link twist about x (rad).
    #[serde(rename = "alpha")]
    pub alpha_twist: f64,
    /// Constant added to the joint variable (rad).
    pub theta_offset: f64,
}

impl DhParameter {
    fn validate(&self, index: usize) -> Result<(), KinematicsError> {
        let all_finite = [self.a, self.d, self.alpha_twist, self.theta_offset]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(KinematicsError::InvalidModel(format!(
                "dh[{index}] has a non-finite value"
            )));
        }
        if self.a < 0.0 {
            return Err(KinematicsError::InvalidModel(format!(
                "dh[{index}].a = {} is negative",
                self.a
            )));
        }
        if !(-std::f64::consts::PI..=std::f64::consts::PI).contains(&self.alpha_twist) {
            return Err(KinematicsError::InvalidModel(format!(
                "dh[{index}].alpha = {} is outside [-pi, pi]",
                self.alpha_twist
            )));
        }
        Ok(())
    }

    /// Homogeneous link transform for joint variable `q`.
    pub fn transform(&self, q: f64) -> Matrix4<f64> {
        let (st, ct) = (q + self.theta_offset).sin_cos();
        let (sa, ca) = self.alpha_twist.sin_cos();
        Matrix4::new(
            ct, -st * ca, st * sa, self.a * ct, //
            st, ct * ca, -ct * sa, self.a * st, //
            0.0, sa, ca, self.d, //
            0.0, 0.0, 0.0, 1.0,
        )
    }
}

/// Serial revolute chain with joint and velocity limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RobotModelFile", into = "RobotModelFile")]
pub struct RobotModel {
    name: String,
    dh: Vec<DhParameter>,
    q_min: Vec<f64>,
    q_max: Vec<f64>,
    v_max: Vec<f64>,
    scale: f64,
}

/// On-disk layout of a robot model. Unknown fields are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RobotModelFile {
    name: String,
    dof: usize,
    dh: Vec<DhParameter>,
    q_min: Vec<f64>,
    q_max: Vec<f64>,
    v_max: Vec<f64>,
    scale: f64,
}

impl TryFrom<RobotModelFile> for RobotModel {
    type Error = KinematicsError;

    fn try_from(file: RobotModelFile) -> Result<Self, Self::Error> {
        if file.dh.len() != file.dof {
            return Err(KinematicsError::InvalidModel(format!(
                "dof is {} but dh has {} rows",
                file.dof,
                file.dh.len()
            )));
        }
        RobotModel::new(file.name, file.dh, file.q_min, file.q_max, file.v_max, file.scale)
    }
}

impl From<RobotModel> for RobotModelFile {
    fn from(m: RobotModel) -> Self {
        RobotModelFile {
            dof: m.dh.len(),
            name: m.name,
            dh: m.dh,
            q_min: m.q_min,
            q_max: m.q_max,
            v_max: m.v_max,
            scale: m.scale,
        }
    }
}

impl RobotModel {
    pub fn new(
        name: impl Into<String>,
        dh: Vec<DhParameter>,
        q_min: Vec<f64>,
        q_max: Vec<f64>,
        v_max: Vec<f64>,
        scale: f64,
    ) -> Result<Self, KinematicsError> {
        let dof = dh.len();
        if dof == 0 {
            return Err(KinematicsError::InvalidModel("model has no joints".into()));
        }
        for (label, v) in [("q_min", &q_min), ("q_max", &q_max), ("v_max", &v_max)] {
            if v.len() != dof {
                return Err(KinematicsError::InvalidModel(format!(
                    "{label} has {} entries, expected {dof}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(KinematicsError::InvalidModel(format!(
                    "{label} has a non-finite entry"
                )));
            }
        }
        for (i, p) in dh.iter().enumerate() {
            p.validate(i)?;
            if q_min[i] >= q_max[i] {
                return Err(KinematicsError::InvalidModel(format!(
                    "joint {i}: q_min {} is not below q_max {}",
                    q_min[i], q_max[i]
                )));
            }
            if v_max[i] <= 0.0 {
                return Err(KinematicsError::InvalidModel(format!(
                    "joint {i}: v_max must be positive"
                )));
            }
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(KinematicsError::InvalidScale(scale));
        }
        Ok(RobotModel {
            name: name.into(),
            dh,
            q_min,
            q_max,
            v_max,
            scale,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, KinematicsError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KinematicsError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| KinematicsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dof(&self) -> usize {
        self.dh.len()
    }

    pub fn dh(&self) -> &[DhParameter] {
        &self.dh
    }

    pub fn q_min(&self) -> &[f64] {
        &self.q_min
    }

    pub fn q_max(&self) -> &[f64] {
        &self.q_max
    }

    pub fn v_max(&self) -> &[f64] {
        &self.v_max
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Midpoint of every joint range.
    pub fn mid_range(&self) -> JointVector {
        JointVector(
            self.q_min
                .iter()
                .zip(&self.q_max)
                .map(|(lo, hi)| 0.5 * (lo + hi))
                .collect(),
        )
    }

    pub(crate) fn check_dof(&self, q: &[f64]) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.dof(),
                actual: q.len(),
            });
        }
        Ok(())
    }
}

/// Joint positions (rad) for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct JointVector(Vec<f64>);

impl JointVector {
    pub fn new(values: Vec<f64>) -> Result<Self, KinematicsError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(KinematicsError::NonFinite(i));
        }
        Ok(JointVector(values))
    }

    pub fn zeros(dof: usize) -> Self {
        JointVector(vec![0.0; dof])
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, KinematicsError> {
        Self::new(values.to_vec())
    }

    pub fn dof(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Largest absolute per-joint difference.
    pub fn max_abs_diff(&self, other: &JointVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Builds a vector from values already known to be finite.
    pub(crate) fn from_finite(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        JointVector(values)
    }
}

impl Deref for JointVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for JointVector {
    type Error = KinematicsError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        JointVector::new(values)
    }
}

impl From<JointVector> for Vec<f64> {
    fn from(q: JointVector) -> Self {
        q.0
    }
}

impl fmt::Display for JointVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.4}")?;
        }
        write!(f, "]")
    }
}

/// Rigid transform: position (m) and rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
        }
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Pose {
            position: m.fixed_view::<3, 1>(0, 3).into_owned(),
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        m
    }

    /// Pose from a translation and roll/pitch/yaw angles (extrinsic x-y-z).
    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        let rotation = nalgebra::Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]);
        Pose {
            position: Vector3::from(xyz),
            rotation: rotation.into_inner(),
        }
    }

    /// Maps a point expressed in this frame into the parent frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.position
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.rotation * other.position + self.position,
            rotation: self.rotation * other.rotation,
        }
    }

    /// Local z axis in the parent frame.
    pub fn z_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FkResult {
    pub end_effector: Pose,
    /// Base frame followed by the frame after each joint (`dof + 1` entries).
    /// Joint `i` rotates about the z axis of `frames[i]`.
    pub frames: Vec<Pose>,
}

pub fn forward_kinematics(model: &RobotModel, q: &[f64]) -> Result<FkResult, KinematicsError> {
    model.check_dof(q)?;
    let mut frames = Vec::with_capacity(model.dof() + 1);
    let mut t = Matrix4::identity();
    frames.push(Pose::identity());
    for (p, &qi) in model.dh.iter().zip(q) {
        t *= p.transform(qi);
        frames.push(Pose::from_homogeneous(&t));
    }
    Ok(FkResult {
        end_effector: *frames.last().expect("at least one joint"),
        frames,
    })
}

/// Linear-velocity Jacobian of a point rigidly attached to `link`
/// (0-based, the link moved by joints `0..=link`), given FK frames.
pub(crate) fn point_jacobian(frames: &[Pose], point: &Vector3<f64>, link: usize) -> Matrix3xX<f64> {
    let dof = frames.len() - 1;
    let mut jp = Matrix3xX::zeros(dof);
    for i in 0..=link.min(dof - 1) {
        let z = frames[i].z_axis();
        jp.set_column(i, &z.cross(&(point - frames[i].position)));
    }
    jp
}

pub fn jacobian(model: &RobotModel, q: &[f64]) -> Result<Jacobian, KinematicsError> {
    let fk = forward_kinematics(model, q)?;
    let p_ee = fk.end_effector.position;
    let mut j = Jacobian::zeros(model.dof());
    for i in 0..model.dof() {
        let z = fk.frames[i].z_axis();
        let lin = z.cross(&(p_ee - fk.frames[i].position));
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
    }
    Ok(j)
}

/// Yoshikawa manipulability `sqrt(det(J Jᵀ))`.
///
/// Evaluated as the product of the singular values of `J`, which keeps the
/// value at a true singularity at round-off level instead of the square root
/// of it.
pub fn manipulability(model: &RobotModel, q: &[f64]) -> Result<f64, KinematicsError> {
    if model.dof() < 6 {
        return Err(KinematicsError::UnsupportedModel(model.dof()));
    }
    let j = jacobian(model, q)?;
    let svd = j.svd(false, false);
    Ok(svd.singular_values.iter().product::<f64>().abs())
}

/// Uniformly scales every length of the chain, leaving angles and limits alone.
pub fn scale_model(model: &RobotModel, alpha: f64) -> Result<RobotModel, KinematicsError> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(KinematicsError::InvalidScale(alpha));
    }
    let mut scaled = model.clone();
    for p in &mut scaled.dh {
        p.a *= alpha;
        p.d *= alpha;
    }
    scaled.scale = model.scale * alpha;
    Ok(scaled)
}

pub fn clamp_to_limits(
    model: &RobotModel,
    q: &[f64],
) -> Result<(JointVector, Vec<bool>), KinematicsError> {
    model.check_dof(q)?;
    let mut flags = Vec::with_capacity(q.len());
    let clamped = q
        .iter()
        .zip(model.q_min.iter().zip(&model.q_max))
        .map(|(&v, (&lo, &hi))| {
            let c = v.clamp(lo, hi);
            flags.push(c != v);
            c
        })
        .collect();
    Ok((JointVector::new(clamped)?, flags))
}

/// Models shipped with the repository.
pub mod builtin {
    use super::{KinematicsError, RobotModel};

    pub const UR5: &str = include_str!("../../../models/ur5.json");
    pub const UR5_LEADER: &str = include_str!("../../../models/ur5_leader.json");
    pub const XARM7: &str = include_str!("../../../models/xarm7.json");
    pub const PANDA: &str = include_str!("../../../models/panda.json");

    pub const NAMES: [&str; 4] = ["ur5", "ur5_leader", "xarm7", "panda"];

    pub fn model(name: &str) -> Result<RobotModel, KinematicsError> {
        let text = match name {
            "ur5" => UR5,
            "ur5_leader" => UR5_LEADER,
            "xarm7" => XARM7,
            "panda" => PANDA,
            other => return Err(KinematicsError::UnknownModel(other.to_string())),
        };
        RobotModel::from_json_str(text)
    }

    /// The full-scale follower arms.
    pub fn followers() -> Vec<RobotModel> {
        ["ur5", "xarm7", "panda"]
            .iter()
            .map(|n| model(n).expect("shipped model parses"))
            .collect()
    }
}
