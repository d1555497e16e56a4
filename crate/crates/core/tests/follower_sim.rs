mod common;

use common::*;
use gello_core::follower_sim::{sim_step, tracking_error, ServoDynamics, SimState};
use gello_core::kinematics::{builtin, JointVector};
use proptest::prelude::*;
use std::f64::consts::TAU;

const HOME: [f64; 6] = [0.0, -1.2, 1.4, -1.6, -1.57, 0.0];

fn ur5_state(q: &[f64]) -> SimState {
    SimState::at_rest(JointVector::from_slice(q).unwrap(), 0)
}

#[test]
fn step_response_settles_within_five_time_constants() {
    let m = builtin::model("ur5").unwrap();
    let d = ServoDynamics::for_model(&m);
    let dt = 0.001;
    let offset = 0.005;
    let mut cmd = HOME;
    cmd[1] += offset;
    let mut s = ur5_state(&HOME);
    let ticks = (5.0 * d.time_constant_s / dt).round() as usize;
    for _ in 0..ticks {
        s = sim_step(&m, &d, &s, &cmd, dt).unwrap();
    }
    let err = (cmd[1] - s.q[1]).abs();
    // Continuous first order leaves e^-5 ≈ 0.67 %.
    assert!(err < 0.01 * offset, "error {err}");
    assert!(err > 0.001 * offset);
}

#[test]
fn large_step_slews_at_exactly_v_max() {
    let m = builtin::model("ur5").unwrap();
    let d = ServoDynamics::for_model(&m);
    let mut cmd = HOME;
    cmd[0] += 3.0;
    let mut s = ur5_state(&HOME);
    let mut saturated = 0;
    for _ in 0..200 {
        s = sim_step(&m, &d, &s, &cmd, 0.01).unwrap();
        assert!(s.qd[0].abs() <= d.v_max[0]);
        if s.qd[0] == d.v_max[0] {
            saturated += 1;
        }
    }
    // 3 rad at π rad/s with a short acceleration phase.
    assert!(saturated > 70, "{saturated}");
}

#[test]
fn sinusoid_lag_matches_first_order_response() {
    let m = builtin::model("ur5").unwrap();
    let d = ServoDynamics::for_model(&m);
    let (amp, f, dt) = (0.2, 0.2, 0.001);
    let w = TAU * f;
    let wt = w * d.time_constant_s;
    let expected = amp * wt / (1.0 + wt * wt).sqrt();

    let mut s = ur5_state(&HOME);
    let mut cmds = Vec::new();
    let mut qs = Vec::new();
    for k in 0..(15.0 / dt) as usize {
        let t = k as f64 * dt;
        let mut cmd = HOME;
        cmd[2] += amp * (w * t).sin();
        s = sim_step(&m, &d, &s, &cmd, dt).unwrap();
        // Skip the start-up transient.
        if t > 5.0 {
            cmds.push(JointVector::from_slice(&cmd).unwrap());
            qs.push(s.q.clone());
        }
    }
    let (rms, max) = tracking_error(&cmds, &qs).unwrap();
    assert!(((max - expected) / expected).abs() < 0.1, "max {max} vs {expected}");
    let expected_rms = expected / 2f64.sqrt();
    assert!(((rms - expected_rms) / expected_rms).abs() < 0.1, "rms {rms} vs {expected_rms}");
}

#[test]
fn trajectories_are_bitwise_deterministic() {
    let m = builtin::model("panda").unwrap();
    let d = ServoDynamics::for_model(&m);
    let run = || {
        let mut r = rng(77);
        let mut s = SimState::at_rest(m.mid_range(), 0);
        let mut out = Vec::new();
        for _ in 0..500 {
            let cmd = random_q(&mut r, m.q_min(), m.q_max());
            s = sim_step(&m, &d, &s, &cmd, 0.01).unwrap();
            out.extend(s.q.iter().chain(&s.qd).map(|v| v.to_bits()));
        }
        out
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn fuzzed_commands_keep_state_within_limits(
        cmds in proptest::collection::vec(
            proptest::collection::vec(prop_oneof![-1e6f64..1e6, -10.0f64..10.0, Just(f64::MAX), Just(-f64::MAX)], 7),
            1..200,
        ),
        dt in 1e-4f64..=0.1,
    ) {
        let m = builtin::model("xarm7").unwrap();
        let d = ServoDynamics::for_model(&m);
        let mut s = SimState::at_rest(m.mid_range(), 0);
        for cmd in &cmds {
            s = sim_step(&m, &d, &s, cmd, dt).unwrap();
            for i in 0..7 {
                prop_assert!(s.q[i].is_finite() && s.qd[i].is_finite());
                prop_assert!(s.q[i] >= m.q_min()[i] && s.q[i] <= m.q_max()[i]);
                prop_assert!(s.qd[i].abs() <= d.v_max[i]);
            }
        }
    }
}
