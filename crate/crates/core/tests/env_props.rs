mod common;

use proptest::prelude::*;
use rcgym::envcore::{build_observation, map_action, ActionMode, Env, EnvConfig};
use rcgym::nao::{self, JointSet, SpeedLimits, NUM_JOINTS};
use rcgym::protocol::{encode_effectors_with, PerceptorSnapshot};
use rcgym::tasks;

fn joint_set() -> impl Strategy<Value = JointSet> {
    proptest::sample::subsequence((0..NUM_JOINTS).collect::<Vec<_>>(), 1..=NUM_JOINTS)
        .prop_map(|idx| JointSet::new(idx).unwrap())
}

fn mode() -> impl Strategy<Value = ActionMode> {
    prop_oneof![
        Just(ActionMode::Velocity),
        Just(ActionMode::TargetAngle),
        Just(ActionMode::TargetAngleWithSpeed)
    ]
}

fn action_value() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => -1.5f64..1.5,
        1 => Just(f64::NAN),
        1 => prop_oneof![Just(f64::INFINITY), Just(f64::NEG_INFINITY), Just(1e300), Just(-0.0)],
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mapped_batches_respect_caps_and_joint_set(
        joints in joint_set(),
        mode in mode(),
        raw in proptest::collection::vec(action_value(), 2 * NUM_JOINTS),
        angles in proptest::collection::vec(-200.0f64..200.0, NUM_JOINTS),
        cap in 1.0f64..350.0,
        gain in 0.1f64..100.0,
    ) {
        let mut limits = SpeedLimits::default();
        for j in joints.indices() {
            limits.set(*j, cap);
        }
        let mut snap = PerceptorSnapshot::default();
        snap.joint_angles.copy_from_slice(&angles);
        let action = &raw[..mode.action_dim(joints.len())];
        let batch = map_action(action, mode, &snap, &joints, &limits, gain).unwrap();
        prop_assert!(batch.sync);
        prop_assert_eq!(batch.velocities.keys().copied().collect::<Vec<_>>(), joints.indices().to_vec());
        for (&j, &v) in &batch.velocities {
            prop_assert!(v.is_finite());
            prop_assert!(v.abs() <= limits.get(j), "joint {} velocity {} cap {}", j, v, limits.get(j));
        }
        prop_assert!(encode_effectors_with(&batch, &limits).is_ok());
    }

    #[test]
    fn wrong_action_length_is_rejected(joints in joint_set(), mode in mode(), extra in 1usize..3) {
        let snap = PerceptorSnapshot::default();
        let n = mode.action_dim(joints.len()) + extra;
        prop_assert!(map_action(&vec![0.0; n], mode, &snap, &joints, &SpeedLimits::default(), 10.0).is_err());
    }

    #[test]
    fn observations_are_clipped(
        angles in proptest::collection::vec(-1e4f64..1e4, NUM_JOINTS),
        accel in proptest::array::uniform3(-1e3f64..1e3),
        gyro in proptest::array::uniform3(-1e5f64..1e5),
        ball in proptest::array::uniform3(-100.0f64..100.0),
        clip in 0.1f64..5.0,
    ) {
        let mut snap = PerceptorSnapshot::default();
        snap.joint_angles.copy_from_slice(&angles);
        snap.accel = accel;
        snap.gyro = gyro;
        snap.ball_rel = Some(ball);
        let cfg = EnvConfig { obs_clip: clip, ..Default::default() };
        let obs = build_observation(&snap, None, &cfg);
        prop_assert_eq!(obs.len(), cfg.obs_dim());
        for v in obs {
            prop_assert!(v.is_finite() && v.abs() <= clip);
        }
    }
}

#[test]
fn observation_and_action_dims_follow_the_joint_set() {
    let all = EnvConfig::default();
    assert_eq!(all.obs_dim(), 61);
    assert_eq!(all.act_dim(), 20);
    let leg = common::leg_env(0, 20);
    assert_eq!(leg.obs_dim(), 29);
    let both = EnvConfig {
        action_mode: ActionMode::TargetAngleWithSpeed,
        ..leg
    };
    assert_eq!(both.act_dim(), 8);
    assert_eq!(nao::registry().len(), NUM_JOINTS);
}

/// Runs one episode with the given action and returns (mid rewards, final step).
fn run_episode(task: &str, steps: usize, action: f64) -> (Vec<f64>, rcgym::envcore::StepResult) {
    let cfg = common::leg_env(4, steps);
    let mut env = Env::new(cfg, tasks::lookup(task).unwrap()).unwrap();
    env.reset().unwrap();
    let mut mid = Vec::new();
    loop {
        let r = env.step(&[0.0, action, action, 0.0]).unwrap();
        if r.terminated || r.truncated {
            env.close();
            return (mid, r);
        }
        mid.push(r.reward);
    }
}

#[test]
fn wait_phase_lengths_are_task_specific() {
    for (task, n_wait) in [("simple_kick", 200), ("velocity_kick", 20)] {
        let (mid, last) = run_episode(task, 5, 0.0);
        assert_eq!(mid, vec![0.0; 4]);
        assert!(last.truncated);
        assert_eq!(last.info.wait_cycles, n_wait, "{task}");
        assert_eq!(last.info.episode_steps, 5);
    }
}

#[test]
fn episode_cycles_never_exceed_cap_plus_wait() {
    let cfg = common::leg_env(9, 7);
    let mut env = Env::new(cfg, tasks::lookup("velocity_kick").unwrap()).unwrap();
    let start = env.reset().map(|_| env.history().last().unwrap().sim_time).unwrap();
    let mut last = None;
    for _ in 0..7 {
        let r = env.step(&[0.5, -0.5, 1.0, -1.0]).unwrap();
        if r.terminated || r.truncated {
            last = Some(r);
            break;
        }
    }
    let r = last.unwrap();
    let cycles = ((r.info.sim_time - start) / 0.02).round() as usize;
    assert!(cycles <= 7 + 20, "{cycles} cycles");
    env.close();
}
