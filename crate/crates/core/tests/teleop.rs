mod common;

use common::*;
use gello_core::follower_sim::FollowerSim;
use gello_core::kinematics::{builtin, clamp_to_limits, JointVector, Pose};
use gello_core::teleop::{
    builtin_capsules, safety_check, self_collision_distance, step, ArmGeometry, Capsule,
    LeaderReading, Phase, StepInput, TeleopConfig, TeleopState,
};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::Rng;

const HOME: [f64; 6] = [0.0, -1.2, 1.4, -1.6, -1.57, 0.0];

fn ur5_arm(base: Pose) -> ArmGeometry {
    TeleopConfig::default()
        .arm_geometry(ArmGeometry::new(builtin::model("ur5").unwrap()).with_base(base))
        .unwrap()
}

#[test]
fn capsule_distance_matches_sampling_oracle() {
    let mut rng = rng(0xCA95);
    let mut p = || [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)];
    let mut caps = Vec::new();
    for _ in 0..2000 {
        caps.push((p(), p()));
    }
    let mut rng = common::rng(0xCA96);
    for pair in caps.chunks(2) {
        let (ra, rb) = (rng.gen_range(0.0..0.05), rng.gen_range(0.0..0.05));
        let a = Capsule { link_index: 0, p0: pair[0].0.into(), p1: pair[0].1.into(), radius: ra };
        let b = Capsule { link_index: 0, p0: pair[1].0.into(), p1: pair[1].1.into(), radius: rb };
        let got = self_collision_distance(&[a], &[b]);
        let oracle = (sampled_segment_distance(pair[0].0, pair[0].1, pair[1].0, pair[1].1, 100) - ra - rb).max(0.0);
        assert!((got - oracle).abs() < 1e-3, "{got} vs {oracle}");
        // The exact distance can never exceed any sampled one.
        assert!(got <= oracle + 1e-12);
    }
}

/// World capsules from an independent FK of the model's DH rows.
fn oracle_capsules(base: [f64; 3], yaw: f64, q: &[f64]) -> Vec<(usize, [f64; 3], [f64; 3], f64)> {
    let model = builtin::model("ur5").unwrap();
    let (c, s) = (yaw.cos(), yaw.sin());
    let mut frames = vec![[
        [c, -s, 0.0, base[0]],
        [s, c, 0.0, base[1]],
        [0.0, 0.0, 1.0, base[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]];
    for (p, qi) in model.dh().iter().zip(q) {
        let next = mat_mul(frames.last().unwrap(), &dh_matrix(p.a, p.d, p.alpha_twist, qi + p.theta_offset));
        frames.push(next);
    }
    let apply = |m: &Mat4, v: [f64; 3]| {
        let mut out = [0.0; 3];
        for r in 0..3 {
            out[r] = m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2] + m[r][3];
        }
        out
    };
    builtin_capsules("ur5")
        .unwrap()
        .iter()
        .map(|cs| {
            let f = &frames[cs.link_index];
            (cs.link_index, apply(f, cs.p0), apply(f, cs.p1), cs.radius)
        })
        .collect()
}

fn oracle_min_distance(a: &[(usize, [f64; 3], [f64; 3], f64)], b: &[(usize, [f64; 3], [f64; 3], f64)]) -> f64 {
    let gap = |x: &(usize, [f64; 3], [f64; 3], f64), y: &(usize, [f64; 3], [f64; 3], f64)| {
        (sampled_segment_distance(x.1, x.2, y.1, y.2, 100) - x.3 - y.3).max(0.0)
    };
    let mut best = f64::MAX;
    for (i, x) in a.iter().enumerate() {
        for y in &a[i + 1..] {
            if x.0.abs_diff(y.0) > 1 {
                best = best.min(gap(x, y));
            }
        }
        for y in b {
            best = best.min(gap(x, y));
        }
    }
    best
}

#[test]
fn mirrored_arms_overlap_and_match_oracle() {
    let cfg = TeleopConfig::default();
    let reach = [std::f64::consts::PI, -0.3, 0.3, 0.0, 0.0, 0.0];
    for (gap_x, expect_risk) in [(1.0, true), (1.75, false)] {
        let left = ur5_arm(Pose::identity());
        let right = ur5_arm(Pose::from_xyz_rpy([gap_x, 0.0, 0.0], [0.0, 0.0, std::f64::consts::PI]));
        let status = safety_check(&left, Some((&right, &reach)), &reach, &cfg, 0.0).unwrap();
        assert_eq!(status.self_collision_risk, expect_risk, "{status:?}");

        let oracle = oracle_min_distance(
            &oracle_capsules([0.0; 3], 0.0, &reach),
            &oracle_capsules([gap_x, 0.0, 0.0], std::f64::consts::PI, &reach),
        );
        assert!(
            (status.min_capsule_distance - oracle).abs() < 1e-3,
            "{} vs {oracle}",
            status.min_capsule_distance
        );
        // Inter-arm pairs alone.
        let ol = oracle_capsules([0.0; 3], 0.0, &reach);
        let or = oracle_capsules([gap_x, 0.0, 0.0], std::f64::consts::PI, &reach);
        let mut inter_oracle = f64::MAX;
        for x in &ol {
            for y in &or {
                inter_oracle = inter_oracle.min((sampled_segment_distance(x.1, x.2, y.1, y.2, 100) - x.3 - y.3).max(0.0));
            }
        }
        let inter = self_collision_distance(
            &left.world_capsules(&reach).unwrap(),
            &right.world_capsules(&reach).unwrap(),
        );
        assert!((inter - inter_oracle).abs() < 1e-3, "{inter} vs {inter_oracle}");
        assert_eq!(inter == 0.0, expect_risk);
    }
}

#[test]
fn table_and_singularity_checks() {
    let arm = ur5_arm(Pose::identity());
    // Zero pose: arm straight out, wrist slightly below the base plane.
    let q = [0.0; 6];
    let cfg = TeleopConfig { table_z_m: Some(0.0), ..TeleopConfig::default() };
    let s = safety_check(&arm, None, &q, &cfg, 0.0).unwrap();
    assert!(s.env_collision_risk);
    assert!(s.near_singularity);
    assert!(s.is_fault(&cfg));
    let s = safety_check(&arm, None, &HOME, &cfg, 0.0).unwrap();
    assert!(!s.env_collision_risk);

    // Hard stop turns the singularity warning into a fault.
    let mut q = HOME;
    q[4] = 0.0;
    let hard = TeleopConfig { singularity_hard_stop: true, ..TeleopConfig::default() };
    let s = safety_check(&arm, None, &q, &hard, 0.0).unwrap();
    assert!(s.near_singularity);
    assert!(!s.is_fault(&TeleopConfig::default()));
    assert!(s.is_fault(&hard));
}

#[test]
fn safety_check_is_pure() {
    let arm = ur5_arm(Pose::identity());
    let cfg = TeleopConfig::default();
    let a = safety_check(&arm, None, &HOME, &cfg, 150.0).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(5));
    let b = safety_check(&arm, None, &HOME, &cfg, 150.0).unwrap();
    assert_eq!(a, b);
    assert!(!a.leader_stale);
    assert!(!safety_check(&arm, None, &HOME, &cfg, 200.0).unwrap().leader_stale);
    assert!(safety_check(&arm, None, &HOME, &cfg, 200.001).unwrap().leader_stale);
}

/// Runs the loop against a simulated follower; returns (phase, command,
/// follower q) per tick.
fn run_loop(
    cfg: &TeleopConfig,
    leader: impl Fn(usize) -> Vec<f64>,
    q0: &[f64],
    ticks: usize,
) -> Vec<(Phase, JointVector, JointVector)> {
    let arm = ur5_arm(Pose::identity());
    let mut sim = FollowerSim::new(arm.model.clone(), JointVector::from_slice(q0).unwrap(), 0).unwrap();
    let dt = cfg.dt();
    let mut state = TeleopState::new(0);
    let mut out = Vec::with_capacity(ticks);
    for k in 0..ticks {
        let now = (k as f64 * dt * 1e6).round() as u64;
        let lq = leader(k);
        let o = step(
            &state,
            &StepInput {
                leader: Some(LeaderReading { q: &lq, t_mono_us: now }),
                follower_q: &sim.state.q,
                now_us: now,
                dt,
            },
            cfg,
            &arm,
            None,
        )
        .unwrap();
        sim.step(&o.command, dt).unwrap();
        out.push((o.state.phase, o.command.clone(), sim.state.q.clone()));
        state = o.state;
    }
    out
}

fn assert_command_invariants(cfg: &TeleopConfig, q0: &[f64], log: &[(Phase, JointVector, JointVector)]) {
    let m = builtin::model("ur5").unwrap();
    let dt = cfg.dt();
    let mut prev = clamp_to_limits(&m, q0).unwrap().0;
    for (k, (_, cmd, _)) in log.iter().enumerate() {
        for i in 0..6 {
            assert!(cmd[i] >= m.q_min()[i] && cmd[i] <= m.q_max()[i], "tick {k} joint {i}");
            let step = (cmd[i] - prev[i]).abs();
            assert!(step <= m.v_max()[i] * cfg.v_max_scale * dt + 1e-12, "tick {k} joint {i} step {step}");
        }
        prev = cmd.clone();
    }
}

#[test]
fn start_up_blend_then_active() {
    let cfg = TeleopConfig::default();
    let leader_pose = [0.3, -1.0, 1.2, -1.4, -1.4, 0.2];
    let log = run_loop(&cfg, |_| leader_pose.to_vec(), &HOME, 500);
    assert_eq!(log[0].0, Phase::Syncing);
    let first_active = log.iter().position(|l| l.0 == Phase::Active).expect("reaches Active");
    // The blend is re-anchored on the follower every tick, so the gap closes
    // well before the full ramp but not instantly.
    assert!(first_active > 20 && first_active < 200, "{first_active}");
    assert!(log[first_active..].iter().all(|l| l.0 == Phase::Active));
    assert!(log.last().unwrap().1.max_abs_diff(&JointVector::from_slice(&leader_pose).unwrap()) < 1e-9);
    assert_command_invariants(&cfg, &HOME, &log);
}

#[test]
fn sinusoid_session_is_bitwise_deterministic() {
    let cfg = TeleopConfig::default();
    let leader = |k: usize| {
        let t = k as f64 / 100.0;
        HOME.iter()
            .enumerate()
            .map(|(i, h)| h + 0.2 * (std::f64::consts::TAU * 0.2 * t + i as f64).sin())
            .collect::<Vec<_>>()
    };
    let a = run_loop(&cfg, leader, &HOME, 1000);
    let b = run_loop(&cfg, leader, &HOME, 1000);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.0, y.0);
        for i in 0..6 {
            assert_eq!(x.1[i].to_bits(), y.1[i].to_bits());
            assert_eq!(x.2[i].to_bits(), y.2[i].to_bits());
        }
    }
    assert_command_invariants(&cfg, &HOME, &a);
}

#[test]
fn emitted_commands_keep_clearance_unless_faulting() {
    // Leader folds the forearm back into the base; the loop must stop first.
    let cfg = TeleopConfig { ema_alpha: 1.0, ..TeleopConfig::default() };
    let target = [0.0, -1.2, 2.9, -1.6, -1.57, 0.0];
    let log = run_loop(
        &cfg,
        |k| {
            let s = (k as f64 / 300.0).min(1.0);
            HOME.iter().zip(&target).map(|(h, t)| h + s * (t - h)).collect()
        },
        &HOME,
        500,
    );
    let arm = ur5_arm(Pose::identity());
    let mut faulted = false;
    for (phase, cmd, _) in &log {
        let s = safety_check(&arm, None, cmd, &cfg, 0.0).unwrap();
        assert!(s.min_capsule_distance >= cfg.collision_clearance_m, "{s:?}");
        faulted |= *phase == Phase::Faulted;
    }
    assert!(faulted, "folding trajectory should fault");
    assert_command_invariants(&cfg, &HOME, &log);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_tick_respects_limits_and_rate(
        seed in 0u64..10_000,
        jump_every in 5usize..60,
        alpha in 0.1f64..=1.0,
        scale in 0.2f64..=1.0,
    ) {
        let cfg = TeleopConfig {
            ema_alpha: alpha,
            v_max_scale: scale,
            collision_checking: false,
            ..TeleopConfig::default()
        };
        let m = builtin::model("ur5").unwrap();
        let mut r = rng(seed);
        let mut wild = Vec::new();
        for _ in 0..(300 / jump_every + 2) {
            // Deliberately exceeds the limits now and then.
            wild.push((0..6).map(|_| r.gen_range(-8.0..8.0)).collect::<Vec<f64>>());
        }
        let q0 = random_q(&mut r, m.q_min(), m.q_max());
        let log = run_loop(&cfg, |k| wild[k / jump_every].clone(), &q0, 300);
        assert_command_invariants(&cfg, &q0, &log);
        for (phase, _, _) in &log {
            prop_assert!(*phase != Phase::Faulted);
        }
    }
}

#[test]
fn world_capsules_follow_base_pose() {
    let shifted = ur5_arm(Pose::from_xyz_rpy([0.5, -0.2, 0.1], [0.0, 0.0, 0.0]));
    let origin = ur5_arm(Pose::identity());
    let a = origin.world_capsules(&HOME).unwrap();
    let b = shifted.world_capsules(&HOME).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((y.p0 - x.p0 - Vector3::new(0.5, -0.2, 0.1)).norm() < 1e-12);
    }
}
