//! Statics of the passive leader arm: gravity load, torsional-spring
//! regularisers on selected joints, and the force an operator must apply at
//! the handle to hold the arm still.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{forward_kinematics, point_jacobian, JointVector, KinematicsError, RobotModel};

/// Gravitational acceleration along −z of the base frame (m/s²).
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error)]
pub enum StaticsError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("expected {expected} link inertias, got {actual}")]
    InertiaCount { expected: usize, actual: usize },
    #[error("link {0} has a negative or non-finite mass")]
    InvalidMass(usize),
    #[error("spring on joint {joint} is invalid for a {dof}-joint arm")]
    InvalidSpring { joint: usize, dof: usize },
    #[error("handle position Jacobian vanishes; the model cannot transmit handle forces")]
    DegenerateHandle,
    #[error("configuration path is empty")]
    EmptyPath,
    #[error("handle heights must strictly increase; offending indices {0:?}")]
    NonMonotoneHeights(Vec<usize>),
    #[error("failed to parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mass and centre of mass of one link, in that link's distal DH frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkInertia {
    pub mass: f64,
    pub com: [f64; 3],
}

/// Torsional spring `τ = −k (q − rest)` on one joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpringRegularizer {
    pub joint_index: usize,
    /// N·m/rad
    pub stiffness: f64,
    pub rest_angle: f64,
}

fn check_inertias(leader: &RobotModel, inertias: &[LinkInertia]) -> Result<(), StaticsError> {
    if inertias.len() != leader.dof() {
        return Err(StaticsError::InertiaCount {
            expected: leader.dof(),
            actual: inertias.len(),
        });
    }
    if let Some(i) = inertias
        .iter()
        .position(|l| !(l.mass.is_finite() && l.mass >= 0.0) || l.com.iter().any(|c| !c.is_finite()))
    {
        return Err(StaticsError::InvalidMass(i));
    }
    Ok(())
}

/// Gravitational potential `Σ m g z_com` (J).
pub fn potential_energy(
    leader: &RobotModel,
    inertias: &[LinkInertia],
    q: &[f64],
) -> Result<f64, StaticsError> {
    check_inertias(leader, inertias)?;
    let fk = forward_kinematics(leader, q)?;
    Ok(inertias
        .iter()
        .zip(&fk.frames[1..])
        .map(|(l, frame)| l.mass * GRAVITY * frame.transform_point(&Vector3::from(l.com)).z)
        .sum())
}

/// Generalised gravity force `−∂U/∂q`, from per-link COM Jacobians.
pub fn gravity_torque(
    leader: &RobotModel,
    inertias: &[LinkInertia],
    q: &[f64],
) -> Result<Vec<f64>, StaticsError> {
    check_inertias(leader, inertias)?;
    let fk = forward_kinematics(leader, q)?;
    let mut tau = vec![0.0; leader.dof()];
    for (link, l) in inertias.iter().enumerate() {
        if l.mass == 0.0 {
            continue;
        }
        let com = fk.frames[link + 1].transform_point(&Vector3::from(l.com));
        let jp = point_jacobian(&fk.frames, &com, link);
        for (i, t) in tau.iter_mut().enumerate().take(link + 1) {
            *t -= l.mass * GRAVITY * jp[(2, i)];
        }
    }
    Ok(tau)
}

pub fn regularizer_torque(
    springs: &[SpringRegularizer],
    q: &[f64],
) -> Result<Vec<f64>, StaticsError> {
    let mut tau = vec![0.0; q.len()];
    for s in springs {
        if s.joint_index >= q.len() || !(s.stiffness.is_finite() && s.stiffness >= 0.0) {
            return Err(StaticsError::InvalidSpring {
                joint: s.joint_index,
                dof: q.len(),
            });
        }
        tau[s.joint_index] -= s.stiffness * (q[s.joint_index] - s.rest_angle);
    }
    Ok(tau)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldingForce {
    /// Magnitude of the handle force (N).
    pub force_n: f64,
    pub force: Vector3<f64>,
    /// Joint torque the handle force cannot balance, left to servo friction (N·m).
    pub residual_nm: f64,
    pub handle_height_m: f64,
}

/// Minimum-norm least-squares handle force `F` with `J_pᵀ F = −(τ_g + τ_s)`,
/// the handle being the leader's end-effector frame.
pub fn holding_force(
    leader: &RobotModel,
    inertias: &[LinkInertia],
    springs: &[SpringRegularizer],
    q: &[f64],
) -> Result<HoldingForce, StaticsError> {
    let tau_g = gravity_torque(leader, inertias, q)?;
    let tau_s = regularizer_torque(springs, q)?;
    let fk = forward_kinematics(leader, q)?;
    let handle = fk.end_effector.position;
    let jp = point_jacobian(&fk.frames, &handle, leader.dof() - 1);
    if jp.iter().all(|v| *v == 0.0) {
        return Err(StaticsError::DegenerateHandle);
    }
    let dof = leader.dof();
    let a = DMatrix::from_fn(dof, 3, |r, c| jp[(c, r)]);
    let b = DVector::from_iterator(dof, tau_g.iter().zip(&tau_s).map(|(g, s)| -(g + s)));
    let svd = a.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1.0);
    let f = svd
        .solve(&b, tol)
        .expect("both singular vector sets were computed");
    let residual = (&a * &f - &b).norm();
    let force = Vector3::new(f[0], f[1], f[2]);
    Ok(HoldingForce {
        force_n: force.norm(),
        force,
        residual_nm: residual,
        handle_height_m: handle.z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfilePoint {
    pub height_m: f64,
    pub force_n: f64,
    pub residual_nm: f64,
}

/// Holding force along a path whose handle heights strictly increase.
pub fn force_height_profile(
    leader: &RobotModel,
    inertias: &[LinkInertia],
    springs: &[SpringRegularizer],
    q_path: &[JointVector],
) -> Result<Vec<ProfilePoint>, StaticsError> {
    if q_path.is_empty() {
        return Err(StaticsError::EmptyPath);
    }
    let heights = q_path
        .iter()
        .map(|q| Ok(forward_kinematics(leader, q)?.end_effector.position.z))
        .collect::<Result<Vec<f64>, StaticsError>>()?;
    let offending: Vec<usize> = (1..heights.len())
        .filter(|&i| heights[i] <= heights[i - 1])
        .collect();
    if !offending.is_empty() {
        return Err(StaticsError::NonMonotoneHeights(offending));
    }
    q_path
        .iter()
        .map(|q| {
            let h = holding_force(leader, inertias, springs, q)?;
            Ok(ProfilePoint {
                height_m: h.handle_height_m,
                force_n: h.force_n,
                residual_nm: h.residual_nm,
            })
        })
        .collect()
}

/// Uniform-rod link masses along the DH lengths, one servo at each link's
/// distal joint, and the handle on the last link.
pub fn rod_inertias(
    model: &RobotModel,
    rod_density: f64,
    servo_mass: f64,
    handle_mass: f64,
) -> Vec<LinkInertia> {
    let dof = model.dof();
    model
        .dh()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            // The link runs from the previous frame's origin, up z by d and
            // then along x by a; expressed in its own distal frame:
            let (sa, ca) = p.alpha_twist.sin_cos();
            let to_distal = |x: f64, z: f64| Vector3::new(x, sa * z, ca * z);
            let d_mass = rod_density * p.d.abs();
            let a_mass = rod_density * p.a.abs();
            let d_mid = to_distal(-p.a, -0.5 * p.d);
            let a_mid = to_distal(-0.5 * p.a, 0.0);
            let point_mass = if i + 1 < dof { servo_mass } else { handle_mass };
            let mass = d_mass + a_mass + point_mass;
            let com = if mass > 0.0 {
                (d_mid * d_mass + a_mid * a_mass) / mass
            } else {
                Vector3::zeros()
            };
            LinkInertia {
                mass,
                com: [com.x, com.y, com.z],
            }
        })
        .collect()
}

pub fn scale_masses(inertias: &[LinkInertia], factor: f64) -> Vec<LinkInertia> {
    inertias
        .iter()
        .map(|l| LinkInertia {
            mass: l.mass * factor,
            com: l.com,
        })
        .collect()
}

/// Mass factor that makes the spring-free holding force average `target_n`
/// over `sweep`. Holding force is linear in the masses.
pub fn calibrate_mass_scale(
    leader: &RobotModel,
    base: &[LinkInertia],
    sweep: &[JointVector],
    target_n: f64,
) -> Result<f64, StaticsError> {
    let profile = force_height_profile(leader, base, &[], sweep)?;
    let mean = profile.iter().map(|p| p.force_n).sum::<f64>() / profile.len() as f64;
    Ok(target_n / mean)
}

/// Leader mass model and regulariser parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderDefaults {
    #[serde(default)]
    pub note: String,
    pub rod_density_kg_per_m: f64,
    pub servo_mass_kg: f64,
    pub handle_mass_kg: f64,
    pub mass_scale: f64,
    pub springs: Vec<SpringRegularizer>,
}

pub const SHIPPED_DEFAULTS: &str = include_str!("../../../config/leader_ur5.json");
pub const SHIPPED_SWEEP: &str = include_str!("../../../sweeps/fig3.json");

impl LeaderDefaults {
    pub fn shipped() -> Self {
        serde_json::from_str(SHIPPED_DEFAULTS).expect("shipped leader defaults parse")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StaticsError> {
        Ok(serde_json::from_str(&read(path.as_ref())?)?)
    }

    /// Masses before the fitted scale is applied.
    pub fn base_inertias(&self, leader: &RobotModel) -> Vec<LinkInertia> {
        rod_inertias(
            leader,
            self.rod_density_kg_per_m,
            self.servo_mass_kg,
            self.handle_mass_kg,
        )
    }

    pub fn inertias(&self, leader: &RobotModel) -> Vec<LinkInertia> {
        scale_masses(&self.base_inertias(leader), self.mass_scale)
    }
}

fn read(path: &Path) -> Result<String, StaticsError> {
    std::fs::read_to_string(path).map_err(|source| StaticsError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Ordered leader configurations for a height sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub description: String,
    pub configurations: Vec<JointVector>,
}

impl Sweep {
    pub fn shipped() -> Self {
        serde_json::from_str(SHIPPED_SWEEP).expect("shipped sweep parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StaticsError> {
        Ok(serde_json::from_str(&read(path.as_ref())?)?)
    }
}

/// One row of the regularisation comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationRow {
    pub height_m: f64,
    pub force_no_spring_n: f64,
    pub force_spring_n: f64,
    /// Unbalanced torque of the sprung configuration.
    pub residual_nm: f64,
}

pub fn regularization_table(
    leader: &RobotModel,
    inertias: &[LinkInertia],
    springs: &[SpringRegularizer],
    sweep: &[JointVector],
) -> Result<Vec<RegularizationRow>, StaticsError> {
    let bare = force_height_profile(leader, inertias, &[], sweep)?;
    let sprung = force_height_profile(leader, inertias, springs, sweep)?;
    Ok(bare
        .iter()
        .zip(&sprung)
        .map(|(b, s)| RegularizationRow {
            height_m: b.height_m,
            force_no_spring_n: b.force_n,
            force_spring_n: s.force_n,
            residual_nm: s.residual_nm,
        })
        .collect())
}

pub const CSV_HEADER: &str = "height_m,force_no_spring_N,force_spring_N,residual_Nm";

pub fn write_regularization_csv<W: Write>(
    mut out: W,
    rows: &[RegularizationRow],
) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            format_significant(r.height_m, 6),
            format_significant(r.force_no_spring_n, 6),
            format_significant(r.force_spring_n, 6),
            format_significant(r.residual_nm, 6)
        )?;
    }
    Ok(())
}

/// `%.*g`-style formatting: `digits` significant digits, trailing zeros
/// trimmed, exponent form for very small or large magnitudes.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let m = trim_zeros(mantissa);
        return format!("{m}e{exp}");
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::DhParameter;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn dh(a: f64, alpha: f64) -> DhParameter {
        DhParameter {
            a,
            d: 0.0,
            alpha_twist: alpha,
            theta_offset: 0.0,
        }
    }

    /// Vertical base axis, then two horizontal-axis links of length 1.
    fn vertical_planar() -> RobotModel {
        RobotModel::new(
            "vplanar",
            vec![dh(0.0, FRAC_PI_2), dh(1.0, 0.0), dh(1.0, 0.0)],
            vec![-PI; 3],
            vec![PI; 3],
            vec![1.0; 3],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn hanging_chain_has_no_gravity_torque() {
        let m = vertical_planar();
        let q = [0.0, -FRAC_PI_2, 0.0];
        let fk = forward_kinematics(&m, &q).unwrap();
        assert!((fk.end_effector.position - Vector3::new(0.0, 0.0, -2.0)).norm() < 1e-12);
        let inertias = rod_inertias(&m, 1.0, 0.2, 0.2);
        let tau = gravity_torque(&m, &inertias, &q).unwrap();
        assert!(tau.iter().all(|t| t.abs() < 1e-12), "{tau:?}");
    }

    #[test]
    fn massless_arm_needs_no_force() {
        let m = vertical_planar();
        let zero = vec![
            LinkInertia {
                mass: 0.0,
                com: [0.0; 3]
            };
            3
        ];
        let q = [0.3, 0.4, -0.2];
        assert!(gravity_torque(&m, &zero, &q).unwrap().iter().all(|t| *t == 0.0));
        assert_eq!(holding_force(&m, &zero, &[], &q).unwrap().force_n, 0.0);
    }

    #[test]
    fn horizontal_pendulum_needs_mg() {
        // Vertical yaw joint, then one horizontal-axis link of length r with
        // all its mass at the handle.
        let (mass, r) = (0.37, 0.8);
        let m = RobotModel::new(
            "pendulum",
            vec![dh(0.0, FRAC_PI_2), dh(r, 0.0)],
            vec![-PI; 2],
            vec![PI; 2],
            vec![1.0; 2],
            1.0,
        )
        .unwrap();
        let inertias = [
            LinkInertia {
                mass: 0.0,
                com: [0.0; 3],
            },
            LinkInertia {
                mass,
                com: [0.0; 3],
            },
        ];
        let h = holding_force(&m, &inertias, &[], &[0.0, 0.0]).unwrap();
        assert!((h.force_n - mass * GRAVITY).abs() < 1e-12);
        assert!(h.force.z > 0.0);
        assert!(h.residual_nm < 1e-12);
    }

    #[test]
    fn regularizer_arithmetic() {
        let springs = [SpringRegularizer {
            joint_index: 1,
            stiffness: 0.2,
            rest_angle: 0.1,
        }];
        assert_eq!(regularizer_torque(&springs, &[0.0, 0.1, 0.0]).unwrap(), vec![0.0; 3]);
        let tau = regularizer_torque(&springs, &[0.0, 0.6, 0.0]).unwrap();
        assert!((tau[1] + 0.1).abs() < 1e-15);
        assert_eq!(tau[0], 0.0);
        let slack = [SpringRegularizer {
            stiffness: 0.0,
            ..springs[0]
        }];
        assert_eq!(regularizer_torque(&slack, &[0.0, 0.6, 0.0]).unwrap(), vec![0.0; 3]);
        assert!(regularizer_torque(&springs, &[0.0]).is_err());
    }

    #[test]
    fn inertia_count_checked() {
        let m = vertical_planar();
        let err = gravity_torque(&m, &[], &[0.0; 3]).unwrap_err();
        assert!(matches!(err, StaticsError::InertiaCount { expected: 3, actual: 0 }));
    }

    #[test]
    fn degenerate_handle() {
        // A single joint with zero lengths: the handle sits on its axis.
        let m = RobotModel::new("point", vec![dh(0.0, 0.0)], vec![-1.0], vec![1.0], vec![1.0], 1.0)
            .unwrap();
        let inertias = [LinkInertia {
            mass: 1.0,
            com: [0.0; 3],
        }];
        assert!(matches!(
            holding_force(&m, &inertias, &[], &[0.0]),
            Err(StaticsError::DegenerateHandle)
        ));
    }

    #[test]
    fn profile_rejects_descending_path() {
        let m = vertical_planar();
        let inertias = rod_inertias(&m, 1.0, 0.0, 0.0);
        let up = JointVector::new(vec![0.0, 0.5, 0.0]).unwrap();
        let flat = JointVector::new(vec![0.0, 0.0, 0.0]).unwrap();
        let err = force_height_profile(&m, &inertias, &[], &[flat.clone(), up.clone(), flat])
            .unwrap_err();
        assert!(matches!(err, StaticsError::NonMonotoneHeights(ref v) if v == &vec![2]));
        assert!(matches!(
            force_height_profile(&m, &inertias, &[], &[]),
            Err(StaticsError::EmptyPath)
        ));
        let single = force_height_profile(&m, &inertias, &[], &[up.clone()]).unwrap();
        let z = forward_kinematics(&m, &up).unwrap().end_effector.position.z;
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].height_m, z);
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_significant(1.9, 6), "1.9");
        assert_eq!(format_significant(1.23456789, 6), "1.23457");
        assert_eq!(format_significant(0.0400001234, 6), "0.0400001");
        assert_eq!(format_significant(123456.7, 6), "123457");
        assert_eq!(format_significant(1234567.0, 6), "1.23457e6");
        assert_eq!(format_significant(0.000012345678, 6), "1.23457e-5");
        assert_eq!(format_significant(-2.5, 6), "-2.5");
        assert_eq!(format_significant(0.0, 6), "0");
    }
}
