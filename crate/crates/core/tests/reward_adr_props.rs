use handfabric::adr::{AdrKind, AdrSchedule};
use handfabric::kinematics::{RobotModel, HAND_DOF};
use handfabric::reward::{compute_reward, hand_obj_distance, RewardConfig, RewardWeights};
use nalgebra::{SVector, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_point(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0))
}

fn random_config(rng: &mut impl Rng) -> RewardConfig {
    let mut cfg = RewardConfig::with_open_hand(RobotModel::reference().hand_joints());
    cfg.beta_obj_goal = rng.gen_range(15.0..20.0);
    cfg.beta_lift = rng.gen_range(1.0..40.0);
    cfg.beta_curl = rng.gen_range(0.01..0.05);
    cfg.weights = RewardWeights {
        hand_obj: rng.gen_range(0.0..3.0),
        obj_goal: rng.gen_range(0.0..3.0),
        lift: rng.gen_range(0.0..3.0),
        curl: rng.gen_range(0.0..3.0),
    };
    cfg
}

/// Direct transcription of the four formulas with explicit loops.
fn oracle(cfg: &RewardConfig, points: &[Vector3<f64>; 5], q: &[f64; HAND_DOF], x_obj: [f64; 3], x_goal: [f64; 3]) -> f64 {
    let mut d: f64 = 0.0;
    for p in points {
        let dist = ((p.x - x_obj[0]).powi(2) + (p.y - x_obj[1]).powi(2) + (p.z - x_obj[2]).powi(2)).sqrt();
        if dist > d {
            d = dist;
        }
    }
    let og = ((x_obj[0] - x_goal[0]).powi(2) + (x_obj[1] - x_goal[1]).powi(2) + (x_obj[2] - x_goal[2]).powi(2)).sqrt();
    let mut curl = 0.0;
    for i in 0..HAND_DOF {
        curl += (q[i] - cfg.q_curl[i]).powi(2);
    }
    cfg.weights.hand_obj * f64::exp(-10.0 * d)
        + cfg.weights.obj_goal * f64::exp(-cfg.beta_obj_goal * og)
        + cfg.weights.lift * f64::exp(-cfg.beta_lift * (x_obj[2] - x_goal[2]).powi(2))
        - cfg.weights.curl * cfg.beta_curl * curl
}

#[test]
fn reward_matches_direct_formula_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let cfg = random_config(&mut rng);
        let points: [Vector3<f64>; 5] = std::array::from_fn(|_| random_point(&mut rng));
        let q: [f64; HAND_DOF] = std::array::from_fn(|_| rng.gen_range(-0.5..1.7));
        let (x_obj, x_goal) = (random_point(&mut rng), random_point(&mut rng));
        let got = compute_reward(&cfg, &points, &SVector::from(q), &x_obj, &x_goal);
        let want = oracle(&cfg, &points, &q, x_obj.into(), x_goal.into());
        assert!((got.total - want).abs() <= 1e-12, "{} vs {}", got.total, want);
        assert!(got.r_hand_obj > 0.0 && got.r_hand_obj <= 1.0);
        assert!(got.r_obj_goal > 0.0 && got.r_obj_goal <= 1.0);
        assert!(got.r_lift > 0.0 && got.r_lift <= 1.0);
        assert!(got.r_curl <= 0.0);
    }
}

#[test]
fn distance_matches_pairwise_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let points: Vec<Vector3<f64>> = (0..5).map(|_| random_point(&mut rng)).collect();
        let x = random_point(&mut rng);
        let mut best: f64 = 0.0;
        for p in &points {
            best = best.max((p - x).norm());
        }
        assert_eq!(hand_obj_distance(&points, &x), best);
    }
}

#[test]
fn exponential_terms_decrease_with_distance() {
    let cfg = RewardConfig::with_open_hand(RobotModel::reference().hand_joints());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ds: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.5)).collect();
    ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ds.dedup();
    let goal = Vector3::new(0.0, 0.0, 0.0);
    let eval = |d: f64| {
        // object displaced straight up: exercises all three exponentials at once
        let x = Vector3::new(0.0, 0.0, d);
        compute_reward(&cfg, &[x + Vector3::new(d, 0.0, 0.0); 5], &cfg.q_curl, &x, &goal)
    };
    for w in ds.windows(2) {
        let (a, b) = (eval(w[0]), eval(w[1]));
        assert!(b.r_hand_obj < a.r_hand_obj);
        assert!(b.r_obj_goal < a.r_obj_goal);
        if w[0] > 0.0 {
            assert!(b.r_lift < a.r_lift);
        }
    }
}

proptest! {
    #[test]
    fn total_is_linear_in_weights(
        w1 in prop::array::uniform4(0.0f64..3.0),
        w2 in prop::array::uniform4(0.0f64..3.0),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = random_config(&mut rng);
        let points: [Vector3<f64>; 5] = std::array::from_fn(|_| random_point(&mut rng));
        let q = SVector::<f64, HAND_DOF>::from_fn(|_, _| rng.gen_range(-0.5..1.5));
        let (x_obj, x_goal) = (random_point(&mut rng), random_point(&mut rng));
        let weights = |w: [f64; 4]| RewardWeights { hand_obj: w[0], obj_goal: w[1], lift: w[2], curl: w[3] };
        let mut total = |w: [f64; 4]| {
            cfg.weights = weights(w);
            compute_reward(&cfg, &points, &q, &x_obj, &x_goal).total
        };
        let sum: [f64; 4] = std::array::from_fn(|i| w1[i] + w2[i]);
        let (a, b, c) = (total(w1), total(w2), total(sum));
        prop_assert!((c - (a + b)).abs() <= 1e-12);
    }

    #[test]
    fn reach_term_ignores_point_order(seed in 0u64..1000, perm in Just([3usize, 0, 4, 1, 2])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = RewardConfig::with_open_hand(RobotModel::reference().hand_joints());
        let points: [Vector3<f64>; 5] = std::array::from_fn(|_| random_point(&mut rng));
        let shuffled: [Vector3<f64>; 5] = std::array::from_fn(|i| points[perm[i]]);
        let x = random_point(&mut rng);
        let a = compute_reward(&cfg, &points, &cfg.q_curl, &x, &x);
        let b = compute_reward(&cfg, &shuffled, &cfg.q_curl, &x, &x);
        prop_assert_eq!(a.r_hand_obj, b.r_hand_obj);
    }
}

/// The physics randomization table, typed in independently of the data file.
/// Beta rows are positive magnitudes.
const TABLE: [(&str, f64, f64, f64, f64); 27] = [
    ("robot_static_friction", 1.0, 1.0, 0.3, 1.2),
    ("robot_dynamic_friction", 1.0, 1.0, 0.2, 1.0),
    ("robot_restitution", 1.0, 1.0, 0.8, 1.0),
    ("robot_pd_stiffness_scale", 1.0, 1.0, 0.5, 2.0),
    ("robot_pd_damping_scale", 1.0, 1.0, 0.5, 2.0),
    ("robot_joint_friction", 0.0, 0.0, -10.0, 10.0),
    ("object_static_friction", 1.0, 1.0, 0.3, 1.2),
    ("object_dynamic_friction", 1.0, 1.0, 0.2, 1.0),
    ("object_restitution", 1.0, 1.0, 0.8, 1.0),
    ("object_mass_scale", 1.0, 1.0, 0.5, 3.0),
    ("object_disturbance_accel", 0.0, 0.0, 0.0, 10.0),
    ("object_spawn_width", 0.0, 0.0, 0.0, 0.8),
    ("object_spawn_height", 0.0, 0.0, 0.0, 1.0),
    ("object_pos_noise", 0.0, 0.0, 0.0, 0.3),
    ("object_pos_bias", 0.0, 0.0, 0.0, 0.2),
    ("object_rot_noise", 0.0, 0.0, 0.0, 0.1),
    ("object_rot_bias", 0.0, 0.0, 0.0, 0.08),
    ("robot_init_joint_vel", 0.0, 0.0, 0.0, 1.0),
    ("robot_pos_noise", 0.0, 0.0, 0.0, 0.08),
    ("robot_pos_bias", 0.0, 0.0, 0.0, 0.08),
    ("robot_vel_noise", 0.0, 0.0, 0.0, 0.18),
    ("robot_vel_bias", 0.0, 0.0, 0.0, 0.08),
    ("beta_obj_goal", 15.0, 15.0, 20.0, 20.0),
    ("beta_curl", 0.01, 0.01, 0.05, 0.05),
    ("pd_velocity_target", 1.0, 1.0, 0.0, 0.0),
    ("fabric_damping", 10.0, 10.0, 20.0, 20.0),
    ("observation_annealing", 1.0, 1.0, 0.0, 0.0),
];

#[test]
fn schedule_endpoints_match_table() {
    let state = AdrSchedule::reference().state;
    assert_eq!(state.params().len(), TABLE.len());
    for (name, il, ih, tl, th) in TABLE {
        assert_eq!(state.current_range(name).unwrap(), (il, ih), "{name} initial");
        assert_eq!(state.terminal().current_range(name).unwrap(), (tl, th), "{name} terminal");
    }
}

#[test]
fn ranges_expand_monotonically() {
    let state = AdrSchedule::reference().state;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let uniform: Vec<_> = state.params().iter().filter(|p| p.kind == AdrKind::Uniform).collect();
    for _ in 0..1000 {
        let p = uniform[rng.gen_range(0..uniform.len())];
        let n = rng.gen_range(0..state.n_total);
        let n2 = rng.gen_range(n + 1..=state.n_total);
        let (lo, hi) = state.at(n).current_range(&p.name).unwrap();
        let (lo2, hi2) = state.at(n2).current_range(&p.name).unwrap();
        assert!(lo2 <= lo && hi <= hi2, "{}: n={n} ({lo},{hi}) n'={n2} ({lo2},{hi2})", p.name);
    }
}

#[test]
fn terminal_mass_scaling_is_uniform() {
    let state = AdrSchedule::reference().state.terminal();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws: Vec<f64> = (0..10_000)
        .map(|_| state.sample_with(&mut rng).get("object_mass_scale").unwrap())
        .collect();
    let (min, max) = draws.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!(min > 0.5 && max < 3.0);
    assert!((mean - 1.75).abs() < 0.02, "mean {mean}");
}

#[test]
fn every_step_shares_one_fraction() {
    let state = AdrSchedule::reference().state;
    for n in 0..=state.n_total {
        let s = state.at(n);
        let f = n as f64 / state.n_total as f64;
        for p in s.params() {
            let (lo, _) = s.current_range(&p.name).unwrap();
            let expect = if n == s.n_total { p.terminal.0 } else { p.initial.0 + f * (p.terminal.0 - p.initial.0) };
            assert_eq!(lo, expect);
        }
    }
}
