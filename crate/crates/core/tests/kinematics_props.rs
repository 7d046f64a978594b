use handfabric::kinematics::{
    forward_kinematics, jacobian, load_robot_model, task_points, RobotModel, ARM_DOF,
};
use nalgebra::{DVector, Matrix6xX, UnitQuaternion};
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
name = "tip"
parent = "j2"
xyz = [0.3, 0.0, 0.0]
"#;

fn random_q(model: &RobotModel, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_iterator(model.dof(), model.joints().iter().map(|j| rng.gen_range(j.lo..j.hi)))
}

/// Central differences of FK: translation directly, rotation through the
/// relative rotation vector.
fn fd_jacobian(model: &RobotModel, q: &DVector<f64>, frame: &str, h: f64) -> Matrix6xX<f64> {
    let id = model.frame_id(frame).unwrap();
    let mut jac = Matrix6xX::zeros(model.dof());
    for j in 0..model.dof() {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[j] += h;
        qm[j] -= h;
        let tp = *forward_kinematics(model, &qp).unwrap().get(id);
        let tm = *forward_kinematics(model, &qm).unwrap().get(id);
        let lin = (tp.translation.vector - tm.translation.vector) / (2.0 * h);
        let rel: UnitQuaternion<f64> = tp.rotation * tm.rotation.inverse();
        let ang = rel.scaled_axis() / (2.0 * h);
        jac.fixed_view_mut::<3, 1>(0, j).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, j).copy_from(&ang);
    }
    jac
}

#[test]
fn fk_rotations_are_proper_orthonormal() {
    let model = RobotModel::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let q = random_q(&model, &mut rng);
        let poses = forward_kinematics(&model, &q).unwrap();
        for pose in poses.iter() {
            let r = pose.rotation.to_rotation_matrix().into_inner();
            let err = (r.transpose() * r - nalgebra::Matrix3::identity()).abs().max();
            assert!(err < 1e-9, "orthonormality error {err}");
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn jacobians_match_finite_differences() {
    let reference = RobotModel::reference();
    let planar = load_robot_model(PLANAR_2).unwrap();
    let frames = ["palm", "index_tip", "middle_tip", "ring_tip", "thumb_tip", "arm_4", "thumb_2"];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100 {
        let (model, frame) = if trial % 5 == 0 {
            (&planar, "tip")
        } else {
            (&reference, frames[rng.gen_range(0..frames.len())])
        };
        let q = random_q(model, &mut rng);
        let analytic = jacobian(model, &q, frame).unwrap();
        let numeric = fd_jacobian(model, &q, frame, 1e-6);
        let err = (analytic - numeric).abs().max();
        assert!(err < 1e-5, "trial {trial} frame {frame}: max abs error {err}");
    }
}

#[test]
fn perturbing_one_finger_moves_only_its_tip() {
    let model = RobotModel::reference();
    let q0 = DVector::from_iterator(model.dof(), model.joints().iter().map(|j| 0.5 * (j.lo + j.hi)));
    let base = task_points(&model, &q0).unwrap();
    // hand joints are laid out index, middle, ring, thumb; task points palm, index, middle, ring, thumb
    for finger in 0..4 {
        for k in 0..4 {
            let mut q = q0.clone();
            q[ARM_DOF + 4 * finger + k] += 0.1;
            let moved = task_points(&model, &q).unwrap();
            for (i, (a, b)) in base.iter().zip(&moved).enumerate() {
                let delta = (a - b).norm();
                if i == finger + 1 {
                    assert!(delta > 1e-4, "finger {finger} joint {k} did not move its tip");
                } else {
                    assert_eq!(delta, 0.0, "finger {finger} joint {k} moved point {i}");
                }
            }
        }
    }
}

#[test]
fn task_points_are_lipschitz() {
    let model = RobotModel::reference();
    // every partial derivative of a point is bounded by the longest possible lever
    // arm (sum of link lengths); stack 5 points and 23 joints
    let bound = model.total_link_length() * ((5 * model.dof()) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let q = random_q(&model, &mut rng);
        let dq = DVector::from_fn(model.dof(), |_, _| rng.gen_range(-0.05..0.05));
        let a = task_points(&model, &q).unwrap();
        let b = task_points(&model, &(&q + &dq)).unwrap();
        let dp: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>().sqrt();
        assert!(dp <= bound * dq.norm(), "{dp} > {} ", bound * dq.norm());
    }
}
