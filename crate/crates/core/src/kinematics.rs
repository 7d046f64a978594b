//! Articulated-chain model for the arm + hand: loading, forward kinematics,
//! geometric Jacobians and the five task points (palm + fingertips).
//!
//! Every actuated joint is revolute. A link frame is
//! `parent * fixed_transform * Rot(axis, q)`; task frames are rigidly attached
//! to a link frame. Frames are stored parent-before-child so forward kinematics
//! is a single pass.

use std::collections::HashMap;

use nalgebra::{
    DVector, Isometry3, Matrix6xX, Point3, Quaternion, Translation3, Unit, UnitQuaternion,
    Vector3,
};
use serde::Deserialize;
use thiserror::Error;

use crate::config::{parse_toml, require_finite, ConfigError};

pub const ARM_DOF: usize = 7;
pub const HAND_DOF: usize = 16;
pub const TOTAL_DOF: usize = ARM_DOF + HAND_DOF;

/// Task frame names in the order used by [`task_points`]: palm, then fingertips.
pub const TASK_FRAME_NAMES: [&str; 5] = ["palm", "index_tip", "middle_tip", "ring_tip", "thumb_tip"];

pub const BASE_FRAME: &str = "base";

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("configuration has {got} entries, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown frame `{0}`")]
    UnknownFrame(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointGroup {
    Arm,
    Hand,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub vel_limit: f64,
    pub group: JointGroup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    /// Frame index of the parent (0 is the base).
    pub parent: usize,
    pub fixed_transform: Isometry3<f64>,
    pub axis: Unit<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionSphere {
    pub name: String,
    pub frame: usize,
    pub offset: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum FrameKind {
    Base,
    Joint { joint: usize, link: LinkSpec },
    Fixed { parent: usize, transform: Isometry3<f64> },
}

#[derive(Debug, Clone, PartialEq)]
struct Frame {
    name: String,
    kind: FrameKind,
    /// Joint indices on the path from the base to this frame.
    chain: Vec<usize>,
}

/// Immutable kinematic model. Safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    name: String,
    joints: Vec<JointSpec>,
    frames: Vec<Frame>,
    frame_index: HashMap<String, usize>,
    task_frames: Vec<usize>,
    spheres: Vec<CollisionSphere>,
    /// Frame id of each joint's link frame.
    joint_frames: Vec<usize>,
}

/// Joint positions and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

impl JointState {
    pub fn at_rest(q: DVector<f64>) -> Self {
        let v = DVector::zeros(q.len());
        JointState { q, v }
    }
}

/// World transforms for every frame of a model, indexed by frame id.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePoses {
    poses: Vec<Isometry3<f64>>,
}

impl FramePoses {
    pub(crate) fn empty() -> Self {
        FramePoses { poses: Vec::new() }
    }

    pub fn get(&self, frame: usize) -> &Isometry3<f64> {
        &self.poses[frame]
    }

    pub fn by_name(&self, model: &RobotModel, name: &str) -> Result<&Isometry3<f64>, KinematicsError> {
        Ok(&self.poses[model.frame_id(name)?])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Isometry3<f64>> {
        self.poses.iter()
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

// ---- file schema ---------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RobotFile {
    #[serde(default)]
    name: String,
    joints: Vec<JointEntry>,
    links: Vec<LinkEntry>,
    #[serde(default)]
    task_frames: Vec<TaskFrameEntry>,
    #[serde(default)]
    collision_spheres: Vec<SphereEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointEntry {
    name: String,
    lo: f64,
    hi: f64,
    vel_limit: f64,
    #[serde(default = "default_group")]
    group: JointGroup,
}

fn default_group() -> JointGroup {
    JointGroup::Arm
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkEntry {
    joint: String,
    parent: String,
    #[serde(default)]
    xyz: [f64; 3],
    #[serde(default = "identity_quat")]
    quat: [f64; 4],
    axis: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFrameEntry {
    name: String,
    parent: String,
    #[serde(default)]
    xyz: [f64; 3],
    #[serde(default = "identity_quat")]
    quat: [f64; 4],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SphereEntry {
    name: String,
    frame: String,
    #[serde(default)]
    offset: [f64; 3],
    radius: f64,
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

fn isometry(field: &str, xyz: [f64; 3], wxyz: [f64; 4]) -> Result<Isometry3<f64>, ConfigError> {
    require_finite(field, &xyz)?;
    require_finite(field, &wxyz)?;
    let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
    if q.norm() < 1e-9 {
        return Err(ConfigError::invalid(field, "zero quaternion"));
    }
    Ok(Isometry3::from_parts(
        Translation3::new(xyz[0], xyz[1], xyz[2]),
        UnitQuaternion::from_quaternion(q),
    ))
}

/// Parses and validates a robot description.
pub fn load_robot_model(config_text: &str) -> Result<RobotModel, ConfigError> {
    let file: RobotFile = parse_toml(config_text)?;
    RobotModel::from_file(file)
}

impl RobotModel {
    /// The 23-DoF arm + hand description shipped with the crate.
    pub fn reference() -> RobotModel {
        load_robot_model(include_str!("../data/robot.toml")).expect("shipped robot config is valid")
    }

    fn from_file(file: RobotFile) -> Result<RobotModel, ConfigError> {
        let mut joints = Vec::with_capacity(file.joints.len());
        let mut joint_index = HashMap::new();
        for (i, j) in file.joints.into_iter().enumerate() {
            let field = format!("joints[{i}]");
            require_finite(&field, &[j.lo, j.hi, j.vel_limit])?;
            if j.lo >= j.hi {
                return Err(ConfigError::LimitInversion {
                    joint: j.name,
                    lo: j.lo,
                    hi: j.hi,
                });
            }
            if j.vel_limit <= 0.0 {
                return Err(ConfigError::invalid(format!("{field}.vel_limit"), "must be positive"));
            }
            if joint_index.insert(j.name.clone(), i).is_some() {
                return Err(ConfigError::invalid(format!("{field}.name"), format!("duplicate joint `{}`", j.name)));
            }
            joints.push(JointSpec {
                name: j.name,
                lo: j.lo,
                hi: j.hi,
                vel_limit: j.vel_limit,
                group: j.group,
            });
        }

        let mut frames = vec![Frame {
            name: BASE_FRAME.to_string(),
            kind: FrameKind::Base,
            chain: Vec::new(),
        }];
        let mut frame_index: HashMap<String, usize> = HashMap::from([(BASE_FRAME.to_string(), 0)]);
        let mut linked = vec![false; joints.len()];
        let mut joint_frames = vec![0; joints.len()];

        for (i, l) in file.links.into_iter().enumerate() {
            let field = format!("links[{i}]");
            let joint = *joint_index.get(&l.joint).ok_or_else(|| ConfigError::DanglingFrame {
                referrer: field.clone(),
                frame: l.joint.clone(),
            })?;
            if linked[joint] {
                return Err(ConfigError::invalid(format!("{field}.joint"), format!("joint `{}` linked twice", l.joint)));
            }
            let parent = *frame_index.get(&l.parent).ok_or_else(|| ConfigError::DanglingFrame {
                referrer: field.clone(),
                frame: l.parent.clone(),
            })?;
            require_finite(&format!("{field}.axis"), &l.axis)?;
            let axis = Vector3::from(l.axis);
            let norm = axis.norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(ConfigError::invalid(format!("{field}.axis"), format!("axis norm {norm} is not 1")));
            }
            let fixed_transform = isometry(&field, l.xyz, l.quat)?;
            let mut chain = frames[parent].chain.clone();
            chain.push(joint);
            linked[joint] = true;
            joint_frames[joint] = frames.len();
            frame_index.insert(l.joint.clone(), frames.len());
            frames.push(Frame {
                name: l.joint,
                kind: FrameKind::Joint {
                    joint,
                    link: LinkSpec {
                        parent,
                        fixed_transform,
                        axis: Unit::new_unchecked(axis),
                    },
                },
                chain,
            });
        }
        if let Some(j) = linked.iter().position(|l| !l) {
            return Err(ConfigError::invalid("links", format!("joint `{}` has no link", joints[j].name)));
        }

        let mut task_frames = Vec::new();
        for (i, t) in file.task_frames.into_iter().enumerate() {
            let field = format!("task_frames[{i}]");
            let parent = *frame_index.get(&t.parent).ok_or_else(|| ConfigError::DanglingFrame {
                referrer: field.clone(),
                frame: t.parent.clone(),
            })?;
            if frame_index.contains_key(&t.name) {
                return Err(ConfigError::invalid(format!("{field}.name"), format!("duplicate frame `{}`", t.name)));
            }
            let transform = isometry(&field, t.xyz, t.quat)?;
            let chain = frames[parent].chain.clone();
            frame_index.insert(t.name.clone(), frames.len());
            task_frames.push(frames.len());
            frames.push(Frame {
                name: t.name,
                kind: FrameKind::Fixed { parent, transform },
                chain,
            });
        }

        let mut spheres = Vec::new();
        for (i, s) in file.collision_spheres.into_iter().enumerate() {
            let field = format!("collision_spheres[{i}]");
            let frame = *frame_index.get(&s.frame).ok_or_else(|| ConfigError::DanglingFrame {
                referrer: field.clone(),
                frame: s.frame.clone(),
            })?;
            require_finite(&field, &s.offset)?;
            if !(s.radius > 0.0) {
                return Err(ConfigError::invalid(format!("{field}.radius"), "must be positive"));
            }
            spheres.push(CollisionSphere {
                name: s.name,
                frame,
                offset: Vector3::from(s.offset),
                radius: s.radius,
            });
        }

        Ok(RobotModel {
            name: file.name,
            joints,
            frames,
            frame_index,
            task_frames,
            spheres,
            joint_frames,
        })
    }

    /// Checks the arm + hand layout the controller relies on: 7 arm joints
    /// followed by 16 hand joints and the five named task frames.
    pub fn validate_arm_hand(&self) -> Result<(), ConfigError> {
        if self.joints.len() != TOTAL_DOF {
            return Err(ConfigError::invalid(
                "joints",
                format!("expected {TOTAL_DOF} actuated joints, found {}", self.joints.len()),
            ));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let expected = if i < ARM_DOF { JointGroup::Arm } else { JointGroup::Hand };
            if j.group != expected {
                return Err(ConfigError::invalid(
                    format!("joints[{i}].group"),
                    "arm joints must precede hand joints",
                ));
            }
        }
        if self.task_frames.len() != TASK_FRAME_NAMES.len() {
            return Err(ConfigError::invalid(
                "task_frames",
                format!("expected 5 task frames, found {}", self.task_frames.len()),
            ));
        }
        for (i, (&id, expected)) in self.task_frames.iter().zip(TASK_FRAME_NAMES).enumerate() {
            if self.frames[id].name != expected {
                return Err(ConfigError::invalid(
                    format!("task_frames[{i}].name"),
                    format!("expected `{expected}`, found `{}`", self.frames[id].name),
                ));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn arm_joints(&self) -> &[JointSpec] {
        &self.joints[..ARM_DOF.min(self.joints.len())]
    }

    pub fn hand_joints(&self) -> &[JointSpec] {
        &self.joints[ARM_DOF.min(self.joints.len())..]
    }

    pub fn lower_limits(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.lo))
    }

    pub fn upper_limits(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.hi))
    }

    pub fn frame_id(&self, name: &str) -> Result<usize, KinematicsError> {
        self.frame_index
            .get(name)
            .copied()
            .ok_or_else(|| KinematicsError::UnknownFrame(name.to_string()))
    }

    pub fn frame_name(&self, id: usize) -> &str {
        &self.frames[id].name
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_names(&self) -> impl Iterator<Item = &str> {
        self.frames.iter().map(|f| f.name.as_str())
    }

    pub fn task_frames(&self) -> &[usize] {
        &self.task_frames
    }

    pub fn collision_spheres(&self) -> &[CollisionSphere] {
        &self.spheres
    }

    pub fn sphere_id(&self, name: &str) -> Option<usize> {
        self.spheres.iter().position(|s| s.name == name)
    }

    /// Joint indices on the path from the base to `frame`.
    pub fn chain(&self, frame: usize) -> &[usize] {
        &self.frames[frame].chain
    }

    /// Sum of the translation lengths of all fixed transforms; an upper bound on
    /// any lever arm in the model.
    pub fn total_link_length(&self) -> f64 {
        self.frames
            .iter()
            .map(|f| match &f.kind {
                FrameKind::Base => 0.0,
                FrameKind::Joint { link, .. } => link.fixed_transform.translation.vector.norm(),
                FrameKind::Fixed { transform, .. } => transform.translation.vector.norm(),
            })
            .sum()
    }

    fn check_dim(&self, q: &DVector<f64>) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }
}

/// World transform of every frame (base, link frames, task frames).
pub fn forward_kinematics(model: &RobotModel, q: &DVector<f64>) -> Result<FramePoses, KinematicsError> {
    model.check_dim(q)?;
    let mut poses: Vec<Isometry3<f64>> = Vec::with_capacity(model.frames.len());
    for frame in &model.frames {
        let pose = match &frame.kind {
            FrameKind::Base => Isometry3::identity(),
            FrameKind::Joint { joint, link } => {
                let rot = UnitQuaternion::from_axis_angle(&link.axis, q[*joint]);
                poses[link.parent] * link.fixed_transform * rot
            }
            FrameKind::Fixed { parent, transform } => poses[*parent] * transform,
        };
        poses.push(pose);
    }
    Ok(FramePoses { poses })
}

/// World positions of the five task frames' origins (palm first).
pub fn task_points(model: &RobotModel, q: &DVector<f64>) -> Result<Vec<Vector3<f64>>, KinematicsError> {
    let poses = forward_kinematics(model, q)?;
    Ok(task_points_from_poses(model, &poses))
}

pub fn task_points_from_poses(model: &RobotModel, poses: &FramePoses) -> Vec<Vector3<f64>> {
    model
        .task_frames
        .iter()
        .map(|&f| poses.get(f).translation.vector)
        .collect()
}

/// World position of a point rigidly attached to `frame`.
pub fn point_in_world(poses: &FramePoses, frame: usize, local: &Vector3<f64>) -> Vector3<f64> {
    (poses.get(frame) * Point3::from(*local)).coords
}

/// Geometric Jacobian (rows: linear xyz, angular xyz) of the origin of `frame`.
pub fn jacobian(model: &RobotModel, q: &DVector<f64>, frame: &str) -> Result<Matrix6xX<f64>, KinematicsError> {
    let id = model.frame_id(frame)?;
    let poses = forward_kinematics(model, q)?;
    Ok(point_jacobian(model, &poses, id, &Vector3::zeros()))
}

/// Jacobian of a point at `local` in `frame`, from precomputed poses.
/// Columns for joints off the frame's chain are zero.
pub fn point_jacobian(
    model: &RobotModel,
    poses: &FramePoses,
    frame: usize,
    local: &Vector3<f64>,
) -> Matrix6xX<f64> {
    let target = point_in_world(poses, frame, local);
    let mut jac = Matrix6xX::zeros(model.dof());
    for &joint in model.chain(frame) {
        let jf = model.joint_frames[joint];
        let pose = poses.get(jf);
        let FrameKind::Joint { link, .. } = &model.frames[jf].kind else {
            unreachable!("chain entries are joint frames")
        };
        let z = pose.rotation * link.axis.into_inner();
        let p = pose.translation.vector;
        let lin = z.cross(&(target - p));
        jac.fixed_view_mut::<3, 1>(0, joint).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, joint).copy_from(&z);
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) const PLANAR: &str = r#"
name = "planar"
[[joints]]
name = "j1"
lo = -3.0
hi = 3.0
vel_limit = 2.0

[[links]]
joint = "j1"
parent = "base"
axis = [0.0, 0.0, 1.0]

[[task_frames]]
name = "tip"
parent = "j1"
xyz = [0.5, 0.0, 0.0]
"#;

    #[test]
    fn minimal_planar_model_loads() {
        let m = load_robot_model(PLANAR).unwrap();
        assert_eq!(m.dof(), 1);
        assert_eq!(m.task_frames().len(), 1);
        assert!(m.validate_arm_hand().is_err());
    }

    #[test]
    fn reference_model_has_arm_hand_layout() {
        let m = RobotModel::reference();
        assert_eq!(m.dof(), 23);
        assert_eq!(m.arm_joints().len(), 7);
        assert_eq!(m.hand_joints().len(), 16);
        assert_eq!(m.task_frames().len(), 5);
        m.validate_arm_hand().unwrap();
    }

    #[test]
    fn equal_limits_rejected() {
        let text = PLANAR.replace("lo = -3.0\nhi = 3.0", "lo = 1.0\nhi = 1.0");
        assert!(matches!(load_robot_model(&text), Err(ConfigError::LimitInversion { .. })));
    }

    #[test]
    fn dangling_parent_rejected() {
        let text = PLANAR.replace("parent = \"j1\"", "parent = \"nowhere\"");
        let err = load_robot_model(&text).unwrap_err();
        assert!(matches!(err, ConfigError::DanglingFrame { ref frame, .. } if frame == "nowhere"), "{err}");
    }

    #[test]
    fn dangling_sphere_frame_rejected() {
        let text = format!("{PLANAR}\n[[collision_spheres]]\nname = \"s\"\nframe = \"ghost\"\nradius = 0.1\n");
        assert!(matches!(load_robot_model(&text), Err(ConfigError::DanglingFrame { .. })));
    }

    #[test]
    fn parse_error_reports_line() {
        let text = PLANAR.replace("vel_limit = 2.0", "vel_limit = \"fast\"");
        match load_robot_model(&text) {
            Err(ConfigError::Parse { line: Some(line), .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_unit_axis_rejected() {
        let text = PLANAR.replace("axis = [0.0, 0.0, 1.0]", "axis = [0.0, 0.0, 2.0]");
        assert!(matches!(load_robot_model(&text), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn planar_tip_closed_form() {
        let m = load_robot_model(PLANAR).unwrap();
        for &theta in &[0.0, 0.3, -1.2, 2.5] {
            let q = DVector::from_vec(vec![theta]);
            let p = task_points(&m, &q).unwrap()[0];
            assert_relative_eq!(p, Vector3::new(0.5 * theta.cos(), 0.5 * theta.sin(), 0.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn planar_jacobian_at_zero() {
        let m = load_robot_model(PLANAR).unwrap();
        let j = jacobian(&m, &DVector::zeros(1), "tip").unwrap();
        assert_relative_eq!(j.fixed_view::<3, 1>(0, 0).into_owned(), Vector3::new(0.0, 0.5, 0.0), epsilon = 1e-12);
        assert_relative_eq!(j.fixed_view::<3, 1>(3, 0).into_owned(), Vector3::z(), epsilon = 1e-12);
    }

    #[test]
    fn zero_configuration_composes_fixed_transforms() {
        let m = RobotModel::reference();
        let poses = forward_kinematics(&m, &DVector::zeros(m.dof())).unwrap();
        for (id, frame) in m.frames.iter().enumerate() {
            let expected = match &frame.kind {
                FrameKind::Base => Isometry3::identity(),
                FrameKind::Joint { link, .. } => poses.get(link.parent) * link.fixed_transform,
                FrameKind::Fixed { parent, transform } => poses.get(*parent) * transform,
            };
            assert_relative_eq!(poses.get(id).to_homogeneous(), expected.to_homogeneous(), epsilon = 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = RobotModel::reference();
        assert_eq!(
            forward_kinematics(&m, &DVector::zeros(3)).unwrap_err(),
            KinematicsError::DimensionMismatch { expected: 23, got: 3 }
        );
        assert!(matches!(jacobian(&m, &DVector::zeros(23), "elbow_tip"), Err(KinematicsError::UnknownFrame(_))));
    }

    #[test]
    fn chain_topology() {
        let m = RobotModel::reference();
        let q = DVector::from_element(23, 0.2);
        let tip = jacobian(&m, &q, "index_tip").unwrap();
        let palm = jacobian(&m, &q, "palm").unwrap();
        assert!(tip.column(0).norm() > 1e-3, "arm column for fingertip must be nonzero");
        for j in ARM_DOF..TOTAL_DOF {
            assert_eq!(palm.column(j).norm(), 0.0, "hand column {j} for palm must be zero");
        }
        // index tip depends only on arm joints and the four index joints
        for j in ARM_DOF + 4..TOTAL_DOF {
            assert_eq!(tip.column(j).norm(), 0.0);
        }
    }

    #[test]
    fn all_joints_at_lower_limit_are_finite() {
        let m = RobotModel::reference();
        let pts = task_points(&m, &m.lower_limits()).unwrap();
        assert!(pts.iter().all(|p| p.iter().all(|v| v.is_finite())));
    }
}
