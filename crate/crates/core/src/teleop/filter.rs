use std::f64::consts::TAU;

use super::{TeleopConfig, TeleopError};
use crate::kinematics::JointVector;

fn check_len(a: &[f64], b: &[f64]) -> Result<(), TeleopError> {
    if a.len() != b.len() {
        return Err(TeleopError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// Exponential moving average: `alpha·raw + (1 − alpha)·prev`.
pub fn smooth(prev: &[f64], raw: &[f64], ema_alpha: f64) -> Result<JointVector, TeleopError> {
    check_len(prev, raw)?;
    if !(ema_alpha > 0.0 && ema_alpha <= 1.0) {
        return Err(TeleopError::Config(format!(
            "ema_alpha must lie in (0, 1], got {ema_alpha}"
        )));
    }
    let out = prev
        .iter()
        .zip(raw)
        .map(|(p, r)| ema_alpha * r + (1.0 - ema_alpha) * p)
        .collect();
    Ok(JointVector::new(out)?)
}

/// Moves each joint from `prev` toward `target` by at most `v_max·dt`.
pub fn rate_limit(
    prev: &[f64],
    target: &[f64],
    v_max: &[f64],
    dt: f64,
) -> Result<JointVector, TeleopError> {
    check_len(prev, target)?;
    check_len(prev, v_max)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(TeleopError::InvalidDt(dt));
    }
    let out = prev
        .iter()
        .zip(target)
        .zip(v_max)
        .map(|((p, t), v)| {
            let step = v * dt;
            p + (t - p).clamp(-step, step)
        })
        .collect();
    Ok(JointVector::new(out)?)
}

/// Start-up blend from the follower's pose toward the leader's.
///
/// Returns the blended command and whether the two poses already agree
/// within `sync_eps_rad` in every joint.
pub fn sync_blend(
    follower_q: &[f64],
    leader_q: &[f64],
    elapsed_s: f64,
    config: &TeleopConfig,
) -> Result<(JointVector, bool), TeleopError> {
    check_len(follower_q, leader_q)?;
    let s = (elapsed_s.max(0.0) / config.sync_ramp_s).min(1.0);
    let mut gap: f64 = 0.0;
    let out = follower_q
        .iter()
        .zip(leader_q)
        .map(|(f, l)| {
            gap = gap.max((l - f).abs());
            f + s * (l - f)
        })
        .collect();
    Ok((JointVector::new(out)?, gap < config.sync_eps_rad))
}

/// Shifts each angle by whole turns to the representative nearest `reference`.
pub fn unwrap_near(raw: &[f64], reference: &[f64]) -> Result<JointVector, TeleopError> {
    check_len(reference, raw)?;
    let out = raw
        .iter()
        .zip(reference)
        .map(|(r, p)| r + TAU * ((p - r) / TAU).round())
        .collect();
    Ok(JointVector::new(out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_cases() {
        assert_eq!(smooth(&[0.3, 0.1], &[1.0, 2.0], 1.0).unwrap().as_slice(), &[1.0, 2.0]);
        assert_eq!(smooth(&[0.5], &[0.5], 0.3).unwrap().as_slice(), &[0.5]);
        assert!((smooth(&[0.0], &[1.0], 0.8).unwrap()[0] - 0.8).abs() < 1e-15);
        assert!(smooth(&[0.0], &[1.0, 2.0], 0.8).is_err());
        assert!(smooth(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn rate_limit_cases() {
        let out = rate_limit(&[0.0], &[0.005], &[1.0], 0.01).unwrap();
        assert_eq!(out[0], 0.005);
        let out = rate_limit(&[0.0, 0.0], &[0.5, -0.5], &[1.0, 1.0], 0.01).unwrap();
        assert!((out[0] - 0.01).abs() < 1e-15);
        assert!((out[1] + 0.01).abs() < 1e-15);
        assert!(matches!(
            rate_limit(&[0.0], &[1.0], &[1.0], 0.0),
            Err(TeleopError::InvalidDt(_))
        ));
        assert!(rate_limit(&[0.0], &[1.0], &[1.0], -0.1).is_err());
    }

    #[test]
    fn rate_limit_step_count() {
        // ⌈|Δ| / (v·dt)⌉ ticks to arrive.
        let (delta, v, dt) = (0.537, 0.8, 0.01);
        let expected = (delta / (v * dt) as f64).ceil() as usize;
        let mut q = vec![0.0];
        let mut ticks = 0;
        while q[0] != delta {
            q = rate_limit(&q, &[delta], &[v], dt).unwrap().into_inner();
            ticks += 1;
            assert!(ticks <= expected);
        }
        assert_eq!(ticks, expected);
    }

    #[test]
    fn sync_blend_cases() {
        let cfg = TeleopConfig::default();
        let (cmd, synced) = sync_blend(&[0.2, 0.3], &[0.2, 0.3], 0.0, &cfg).unwrap();
        assert!(synced);
        assert_eq!(cmd.as_slice(), &[0.2, 0.3]);

        let (cmd, synced) = sync_blend(&[0.0], &[1.0], 0.0, &cfg).unwrap();
        assert!(!synced);
        assert_eq!(cmd[0], 0.0);

        let (cmd, _) = sync_blend(&[0.0], &[1.0], cfg.sync_ramp_s / 2.0, &cfg).unwrap();
        assert!((cmd[0] - 0.5).abs() < 1e-15);

        let (cmd, _) = sync_blend(&[0.0], &[1.0], 10.0 * cfg.sync_ramp_s, &cfg).unwrap();
        assert_eq!(cmd[0], 1.0);
    }

    #[test]
    fn unwrap_picks_nearest_turn() {
        let out = unwrap_near(&[-3.1, 0.2, 3.0], &[3.1, 0.0, -3.0]).unwrap();
        assert!((out[0] - (-3.1 + TAU)).abs() < 1e-12);
        assert_eq!(out[1], 0.2);
        assert!((out[2] - (3.0 - TAU)).abs() < 1e-12);
    }
}
