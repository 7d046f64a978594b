use std::sync::Arc;

use handfabric::action_space::{decode_action, Action, ActionBox};
use handfabric::fabric::{
    apply_limits, resolve_acceleration, sphere_clearance, Fabric, FabricConfig, FabricState, FabricTargets, FabricTerm,
    TaskMap, TermKind,
};
use handfabric::kinematics::{forward_kinematics, load_robot_model, RobotModel};
use nalgebra::{DVector, UnitQuaternion, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PLANAR_2: &str = r#"
[[joints]]
name = "j1"
lo = -3.0
hi = 3.0
vel_limit = 2.0

[[joints]]
name = "j2"
lo = -3.0
hi = 3.0
vel_limit = 2.0

[[links]]
joint = "j1"
parent = "base"
axis = [0.0, 0.0, 1.0]

[[links]]
joint = "j2"
parent = "j1"
xyz = [0.4, 0.0, 0.0]
axis = [0.0, 0.0, 1.0]

[[task_frames]]
name = "palm"
parent = "j2"
xyz = [0.3, 0.0, 0.0]
"#;

fn random_q(model: &RobotModel, rng: &mut impl Rng, margin: f64) -> DVector<f64> {
    DVector::from_iterator(
        model.dof(),
        model.joints().iter().map(|j| rng.gen_range(j.lo + margin..j.hi - margin)),
    )
}

/// Reference fabric with every forcing term dropped and a geometric palm attractor added.
fn geometric_reference() -> Fabric {
    let mut fabric = Fabric::reference();
    let config = fabric.config_mut();
    config.terms.retain(|t| t.kind == TermKind::Geometric);
    config.terms.push(FabricTerm {
        name: "palm-geometric".into(),
        kind: TermKind::Geometric,
        map: TaskMap::PalmPose,
        metric_weight: 4.0,
        rotation_weight: 0.5,
        stiffness: 3.0,
        damping: None,
        activation: 0.0,
    });
    fabric
}

#[test]
fn geometric_resolve_is_degree_two_homogeneous() {
    let fabric = geometric_reference();
    let model = fabric.model().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..300 {
        let q = random_q(&model, &mut rng, 0.01);
        let v = DVector::from_fn(model.dof(), |_, _| rng.gen_range(-1.5..1.5));
        let targets = FabricTargets {
            palm_pose: Vector6::from_fn(|i, _| if i < 3 { rng.gen_range(-0.5..0.8) } else { rng.gen_range(-1.0..1.0) }),
            pca: Default::default(),
        };
        let base = fabric.resolve(&FabricState { q: q.clone(), v: v.clone(), a_prev: v.clone() * 0.0 }, &targets).unwrap();
        for alpha in [0.5, 2.0, 4.0, rng.gen_range(0.1..5.0)] {
            let scaled = fabric
                .resolve(&FabricState { q: q.clone(), v: &v * alpha, a_prev: v.clone() * 0.0 }, &targets)
                .unwrap();
            let expect = &base * (alpha * alpha);
            let rel = (&scaled - &expect).norm() / expect.norm().max(1e-300);
            assert!(rel < 1e-8, "trial {trial} alpha {alpha}: relative error {rel}");
        }
    }
}

fn planar_geometric_fabric() -> Fabric {
    let model = Arc::new(load_robot_model(PLANAR_2).unwrap());
    let terms = vec![
        FabricTerm {
            name: "attract".into(),
            kind: TermKind::Geometric,
            map: TaskMap::JointSpace,
            metric_weight: 1.0,
            rotation_weight: 1.0,
            stiffness: 1.0,
            damping: None,
            activation: 0.0,
        },
        FabricTerm {
            name: "palm".into(),
            kind: TermKind::Geometric,
            map: TaskMap::PalmPose,
            metric_weight: 2.0,
            rotation_weight: 0.1,
            stiffness: 2.0,
            damping: None,
            activation: 0.0,
        },
    ];
    let config = FabricConfig {
        terms,
        damping_gain: 10.0,
        accel_limit: 1e9,
        jerk_limit: 1e12,
        dt: 1e-3,
        substeps: 1,
        pd_velocity_scale: 1.0,
        nominal_posture: DVector::zeros(2),
        palm_reference: UnitQuaternion::identity(),
    };
    Fabric::new(model, None, config)
}

/// Integrates until the swept joint-space arc length reaches `length`.
fn sweep(fabric: &Fabric, q0: &DVector<f64>, v0: &DVector<f64>, targets: &FabricTargets, length: f64) -> Vec<DVector<f64>> {
    let mut state = FabricState { q: q0.clone(), v: v0.clone(), a_prev: DVector::zeros(2) };
    let mut path = vec![q0.clone()];
    let mut s = 0.0;
    while s < length {
        state = fabric.step(&state, targets).unwrap().state;
        s += (&state.q - path.last().unwrap()).norm();
        path.push(state.q.clone());
    }
    path
}

/// Point at arc length `s` along a polyline.
fn at_arc_length(path: &[DVector<f64>], s: f64) -> DVector<f64> {
    let mut acc = 0.0;
    for w in path.windows(2) {
        let seg = (&w[1] - &w[0]).norm();
        if acc + seg >= s && seg > 0.0 {
            return &w[0] + (&w[1] - &w[0]) * ((s - acc) / seg);
        }
        acc += seg;
    }
    path.last().unwrap().clone()
}

#[test]
fn geometric_paths_are_speed_independent() {
    let fabric = planar_geometric_fabric();
    let q0 = DVector::from_vec(vec![1.0, -0.5]);
    let v0 = DVector::from_vec(vec![0.3, 0.8]);
    let mut targets = FabricTargets { palm_pose: Vector6::zeros(), pca: Default::default() };
    targets.palm_pose[0] = 0.2;
    targets.palm_pose[1] = 0.45;
    let length = 0.8;
    let reference = sweep(&fabric, &q0, &v0, &targets, length);
    for alpha in [0.5, 2.0, 4.0] {
        let path = sweep(&fabric, &q0, &(&v0 * alpha), &targets, length);
        let worst = (0..=200)
            .map(|i| {
                let s = length * i as f64 / 200.0;
                (at_arc_length(&reference, s) - at_arc_length(&path, s)).norm()
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "alpha {alpha}: max deviation {worst}");
    }
}

#[test]
fn random_target_run_respects_every_bound() {
    let fabric = Fabric::reference();
    let model = fabric.model().clone();
    let config = fabric.config().clone();
    let action_box = ActionBox::reference(fabric.basis().unwrap());
    let pairs: Vec<(usize, usize)> = config
        .terms
        .iter()
        .filter_map(|t| match t.map {
            TaskMap::SpherePair(i, j) => Some((i, j)),
            _ => None,
        })
        .collect();
    let (lo, hi) = (model.lower_limits(), model.upper_limits());
    let h = config.substep();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut state = fabric.initial_state();
    let mut targets = fabric.targets_at(&state.q).unwrap();
    for tick in 0..2000 {
        if tick % 20 == 0 {
            targets = decode_action(&Action::from_fn(|_, _| rng.gen_range(-1.0..1.0)), &action_box);
        }
        let mut prev_a = state.a_prev.clone();
        let report = fabric.step(&state, &targets).unwrap();
        for a in &report.substep_accels {
            for k in 0..model.dof() {
                assert!(a[k].abs() <= config.accel_limit);
                assert!((a[k] - prev_a[k]).abs() <= config.jerk_limit * h * (1.0 + 1e-12));
            }
            prev_a = a.clone();
        }
        state = report.state;
        for k in 0..model.dof() {
            assert!(lo[k] <= state.q[k] && state.q[k] <= hi[k]);
        }
        let poses = forward_kinematics(&model, &state.q).unwrap();
        for &(i, j) in &pairs {
            assert!(sphere_clearance(&model, &poses, i, j) > 0.0, "tick {tick}: pair {i}/{j} interpenetrates");
        }
    }
}

#[test]
fn resolve_is_deterministic() {
    let fabric = Fabric::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = random_q(fabric.model(), &mut rng, 0.02);
    let v = DVector::from_fn(q.len(), |_, _| rng.gen_range(-1.0..1.0));
    let state = FabricState { q: q.clone(), v, a_prev: DVector::zeros(q.len()) };
    let targets = fabric.targets_at(&fabric.initial_state().q).unwrap();
    let a = resolve_acceleration(fabric.model(), fabric.basis().map(|b| &**b), fabric.config(), &state, &targets).unwrap();
    let b = fabric.resolve(&state, &targets).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn apply_limits_bounds_hold(
        raw in prop::collection::vec(-200.0f64..200.0, 1..30),
        prev_seed in prop::collection::vec(-1.0f64..1.0, 30),
        accel in 1.0f64..100.0,
        jerk in 1.0f64..2000.0,
        dt in 1e-4f64..0.05,
    ) {
        let n = raw.len();
        let a_raw = DVector::from_vec(raw);
        let a_prev = DVector::from_iterator(n, prev_seed.iter().take(n).map(|p| p * accel));
        let out = apply_limits(&a_raw, &a_prev, accel, jerk, dt);
        for k in 0..n {
            prop_assert!(out[k].abs() <= accel);
            prop_assert!((out[k] - a_prev[k]).abs() <= jerk * dt * (1.0 + 1e-12));
            let within = a_raw[k].abs() <= accel && (a_raw[k] - a_prev[k]).abs() <= jerk * dt;
            if within {
                prop_assert_eq!(out[k], a_raw[k]);
            }
        }
    }
}
