//! Geometric fabric controller.
//!
//! Each term pulls a task-space `(metric, acceleration)` pair back to joint
//! space; the net acceleration is the metric-weighted least-squares solution
//!
//! ```text
//! q̈ = (Σ JᵀMJ)⁻¹ Σ JᵀM (f − J̇q̇)
//! ```
//!
//! Geometric terms produce accelerations homogeneous of degree 2 in velocity
//! and metrics that depend on position only, so a geometric-only fabric traces
//! the same path at any speed. Forcing terms (attractors with damping, barrier
//! pushes) drive the task and break that symmetry.
//!
//! The resolved acceleration is clamped against acceleration and jerk limits
//! and integrated with a midpoint step, one resolve per substep.

use std::sync::Arc;

use nalgebra::{
    DMatrix, DVector, Isometry3, Matrix6xX, RowDVector, SVector, UnitQuaternion, Vector3, Vector6,
};
use serde::Deserialize;
use thiserror::Error;

use crate::action_space::{PcaBasis, PcaCoords, ACTION_DIM, PCA_DIM};
use crate::config::{parse_toml, require_finite, ConfigError};
use crate::kinematics::{
    forward_kinematics, point_in_world, point_jacobian, FramePoses, KinematicsError, RobotModel, ARM_DOF,
    HAND_DOF,
};

/// Lower bound on the gradient norm used to normalize geometric attractors.
pub const GRADIENT_EPS: f64 = 1e-6;
/// Step along the unit flow direction used to difference Jacobians.
pub const JDOT_STEP: f64 = 1e-6;
/// Regularizer in barrier policies `k / (d² + ε)`.
pub const BARRIER_EPS: f64 = 1e-4;
/// Distances are floored here before entering `1/d` metrics.
const MIN_DISTANCE: f64 = 1e-4;

pub const DAMPING_RANGE: (f64, f64) = (10.0, 20.0);
pub const PD_VELOCITY_SCALE_RANGE: (f64, f64) = (0.0, 1.0);

#[derive(Debug, Error)]
pub enum FabricError {
    #[error("summed metric is singular; the term set does not cover every joint")]
    SingularMetric,
    #[error("term `{0}` produced a non-finite value")]
    NonFinite(String),
    #[error("a pca-space term needs a PCA basis")]
    MissingBasis,
    #[error("targets contain non-finite values")]
    NonFiniteTargets,
    #[error("gain `{name}` = {value} outside [{lo}, {hi}]")]
    OutOfRange { name: String, value: f64, lo: f64, hi: f64 },
    #[error("unknown runtime gain `{0}`")]
    UnknownGain(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermKind {
    Geometric,
    Forcing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMap {
    JointSpace,
    PalmPose,
    PcaSpace,
    /// Signed clearance between two collision spheres (by index).
    SpherePair(usize, usize),
    /// Clearance of joint `k` from its nearer limit.
    JointLimit(usize),
}

impl TaskMap {
    pub fn is_barrier(&self) -> bool {
        matches!(self, TaskMap::SpherePair(..) | TaskMap::JointLimit(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FabricTerm {
    pub name: String,
    pub kind: TermKind,
    pub map: TaskMap,
    /// Base metric weight; barriers scale it by `1/d − 1/d_act`.
    pub metric_weight: f64,
    /// Extra weight on the rotational rows of the palm-pose map.
    pub rotation_weight: f64,
    /// Attractor stiffness (1/s²) or barrier gain.
    pub stiffness: f64,
    /// Damping (1/s); `None` uses the fabric-wide damping gain.
    pub damping: Option<f64>,
    /// Barrier activation distance (rad or m).
    pub activation: f64,
}

/// Targets consumed by the palm and PCA forcing terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FabricTargets {
    /// Position (m) then orientation as exponential coordinates relative to the
    /// reference palm orientation.
    pub palm_pose: Vector6<f64>,
    pub pca: PcaCoords,
}

impl FabricTargets {
    pub fn to_vector(&self) -> SVector<f64, ACTION_DIM> {
        SVector::from_iterator(self.palm_pose.iter().chain(self.pca.iter()).copied())
    }

    pub fn from_vector(x: &SVector<f64, ACTION_DIM>) -> Self {
        FabricTargets {
            palm_pose: x.fixed_rows::<6>(0).into_owned(),
            pca: x.fixed_rows::<PCA_DIM>(6).into_owned(),
        }
    }

    pub fn palm_position(&self) -> Vector3<f64> {
        self.palm_pose.fixed_rows::<3>(0).into_owned()
    }

    pub fn palm_rotation_coords(&self) -> Vector3<f64> {
        self.palm_pose.fixed_rows::<3>(3).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.palm_pose.iter().chain(self.pca.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FabricConfig {
    pub terms: Vec<FabricTerm>,
    pub damping_gain: f64,
    pub accel_limit: f64,
    pub jerk_limit: f64,
    pub dt: f64,
    pub substeps: usize,
    pub pd_velocity_scale: f64,
    pub nominal_posture: DVector<f64>,
    /// Orientation that zero rotation coordinates of a palm target refer to.
    pub palm_reference: UnitQuaternion<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FabricState {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub a_prev: DVector<f64>,
}

impl FabricState {
    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        FabricState {
            q,
            v: DVector::zeros(n),
            a_prev: DVector::zeros(n),
        }
    }
}

/// Position/velocity setpoint for the joint PD controller.
#[derive(Debug, Clone, PartialEq)]
pub struct PdTarget {
    pub q_des: DVector<f64>,
    pub v_des: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuntimeGain {
    Damping,
    PdVelocityScale,
}

impl std::str::FromStr for RuntimeGain {
    type Err = FabricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "damping" => Ok(RuntimeGain::Damping),
            "pd_velocity_scale" => Ok(RuntimeGain::PdVelocityScale),
            other => Err(FabricError::UnknownGain(other.to_string())),
        }
    }
}

impl FabricConfig {
    /// Returns a copy with a runtime gain changed; takes effect on the next step.
    pub fn set_runtime_gain(&self, gain: RuntimeGain, value: f64) -> Result<FabricConfig, FabricError> {
        let (name, (lo, hi)) = match gain {
            RuntimeGain::Damping => ("damping", DAMPING_RANGE),
            RuntimeGain::PdVelocityScale => ("pd_velocity_scale", PD_VELOCITY_SCALE_RANGE),
        };
        if !(lo..=hi).contains(&value) {
            return Err(FabricError::OutOfRange {
                name: name.to_string(),
                value,
                lo,
                hi,
            });
        }
        let mut next = self.clone();
        match gain {
            RuntimeGain::Damping => next.damping_gain = value,
            RuntimeGain::PdVelocityScale => next.pd_velocity_scale = value,
        }
        Ok(next)
    }

    pub fn substep(&self) -> f64 {
        self.dt / self.substeps as f64
    }

    pub fn validate(&self, model: &RobotModel) -> Result<(), ConfigError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(ConfigError::invalid("rate_hz", "must be positive"));
        }
        if !(1..=2).contains(&self.substeps) {
            return Err(ConfigError::invalid("substeps", "must be 1 or 2"));
        }
        for (field, v) in [
            ("damping_gain", self.damping_gain),
            ("accel_limit", self.accel_limit),
            ("jerk_limit", self.jerk_limit),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::invalid(field, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.pd_velocity_scale) {
            return Err(ConfigError::invalid("pd_velocity_scale", "must lie in [0, 1]"));
        }
        if self.nominal_posture.len() != model.dof() {
            return Err(ConfigError::invalid(
                "nominal_posture",
                format!("expected {} entries, found {}", model.dof(), self.nominal_posture.len()),
            ));
        }
        for term in &self.terms {
            let field = format!("terms.{}", term.name);
            if !(term.metric_weight > 0.0) || !(term.rotation_weight > 0.0) {
                return Err(ConfigError::invalid(field, "metric weights must be positive"));
            }
            require_finite(&field, &[term.stiffness, term.activation, term.damping.unwrap_or(0.0)])?;
            if term.map.is_barrier() && !(term.activation > 0.0) {
                return Err(ConfigError::invalid(field, "barrier activation must be positive"));
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str, model: &RobotModel) -> Result<FabricConfig, ConfigError> {
        let file: FabricFile = parse_toml(text)?;
        let config = file.into_config(model)?;
        config.validate(model)?;
        Ok(config)
    }

    /// The controller configuration shipped with the crate, for the reference robot.
    pub fn reference(model: &RobotModel) -> FabricConfig {
        FabricConfig::from_text(include_str!("../data/fabric.toml"), model).expect("shipped fabric config is valid")
    }
}

// ---- file schema ---------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FabricFile {
    rate_hz: f64,
    substeps: usize,
    damping_gain: f64,
    accel_limit: f64,
    jerk_limit: f64,
    pd_velocity_scale: f64,
    nominal_posture: Vec<f64>,
    #[serde(default = "identity_quat")]
    palm_reference_quat: [f64; 4],
    terms: Vec<TermEntry>,
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermEntry {
    name: String,
    kind: TermKind,
    map: String,
    metric_weight: f64,
    #[serde(default = "one")]
    rotation_weight: f64,
    #[serde(default)]
    stiffness: f64,
    damping: Option<f64>,
    #[serde(default)]
    activation: f64,
    /// For `joint-limit`: joint names (default: every joint).
    joints: Option<Vec<String>>,
    /// For `sphere-pair`: pairs of collision sphere names.
    pairs: Option<Vec<[String; 2]>>,
}

fn one() -> f64 {
    1.0
}

impl FabricFile {
    fn into_config(self, model: &RobotModel) -> Result<FabricConfig, ConfigError> {
        let mut terms = Vec::new();
        for entry in self.terms {
            let field = format!("terms.{}", entry.name);
            let mut maps = Vec::new();
            match entry.map.as_str() {
                "joint-space" => maps.push((entry.name.clone(), TaskMap::JointSpace)),
                "palm-pose" => {
                    model
                        .frame_id("palm")
                        .map_err(|_| ConfigError::DanglingFrame {
                            referrer: field.clone(),
                            frame: "palm".into(),
                        })?;
                    maps.push((entry.name.clone(), TaskMap::PalmPose))
                }
                "pca-space" => maps.push((entry.name.clone(), TaskMap::PcaSpace)),
                "joint-limit" => {
                    let indices: Vec<usize> = match &entry.joints {
                        None => (0..model.dof()).collect(),
                        Some(names) => names
                            .iter()
                            .map(|n| {
                                model.joints().iter().position(|j| &j.name == n).ok_or_else(|| {
                                    ConfigError::DanglingFrame {
                                        referrer: field.clone(),
                                        frame: n.clone(),
                                    }
                                })
                            })
                            .collect::<Result<_, _>>()?,
                    };
                    for k in indices {
                        maps.push((format!("{}[{}]", entry.name, model.joints()[k].name), TaskMap::JointLimit(k)));
                    }
                }
                "sphere-pair" => {
                    let pairs = entry
                        .pairs
                        .as_ref()
                        .ok_or_else(|| ConfigError::invalid(format!("{field}.pairs"), "sphere-pair terms need pairs"))?;
                    for [a, b] in pairs {
                        let lookup = |n: &String| {
                            model.sphere_id(n).ok_or_else(|| ConfigError::DanglingFrame {
                                referrer: field.clone(),
                                frame: n.clone(),
                            })
                        };
                        let (i, j) = (lookup(a)?, lookup(b)?);
                        if i == j {
                            return Err(ConfigError::invalid(format!("{field}.pairs"), "sphere paired with itself"));
                        }
                        maps.push((format!("{}[{a}/{b}]", entry.name), TaskMap::SpherePair(i, j)));
                    }
                }
                other => return Err(ConfigError::invalid(format!("{field}.map"), format!("unknown task map `{other}`"))),
            }
            for (name, map) in maps {
                terms.push(FabricTerm {
                    name,
                    kind: entry.kind,
                    map,
                    metric_weight: entry.metric_weight,
                    rotation_weight: entry.rotation_weight,
                    stiffness: entry.stiffness,
                    damping: entry.damping,
                    activation: entry.activation,
                });
            }
        }
        require_finite("rate_hz", &[self.rate_hz])?;
        require_finite("nominal_posture", &self.nominal_posture)?;
        let q = self.palm_reference_quat;
        Ok(FabricConfig {
            terms,
            damping_gain: self.damping_gain,
            accel_limit: self.accel_limit,
            jerk_limit: self.jerk_limit,
            dt: 1.0 / self.rate_hz,
            substeps: self.substeps,
            pd_velocity_scale: self.pd_velocity_scale,
            nominal_posture: DVector::from_vec(self.nominal_posture),
            palm_reference: UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3])),
        })
    }
}

// ---- evaluation ----------------------------------------------------------

/// Kinematic quantities at the current configuration and at a small step along
/// the unit flow direction (for `J̇q̇`).
struct KinematicContext<'a> {
    model: &'a RobotModel,
    poses: FramePoses,
    /// Poses at `q + JDOT_STEP * q̇/‖q̇‖`, absent when `q̇ = 0`.
    ahead: Option<FramePoses>,
    speed: f64,
}

impl<'a> KinematicContext<'a> {
    fn new(model: &'a RobotModel, q: &DVector<f64>, v: &DVector<f64>, need_poses: bool) -> Result<Self, KinematicsError> {
        let speed = v.norm();
        if !need_poses {
            return Ok(KinematicContext {
                model,
                poses: FramePoses::empty(),
                ahead: None,
                speed,
            });
        }
        let poses = forward_kinematics(model, q)?;
        let ahead = if speed > 0.0 {
            Some(forward_kinematics(model, &(q + v * (JDOT_STEP / speed)))?)
        } else {
            None
        };
        Ok(KinematicContext {
            model,
            poses,
            ahead,
            speed,
        })
    }

    /// `J̇q̇ ≈ ‖q̇‖ (J(q + h u) − J(q)) q̇ / h` with `u = q̇/‖q̇‖`; exactly
    /// quadratic in a positive rescaling of `q̇`.
    fn jdot_qdot<F, const R: usize>(&self, v: &DVector<f64>, jac_at: F, current: &nalgebra::OMatrix<f64, nalgebra::Const<R>, nalgebra::Dyn>) -> SVector<f64, R>
    where
        F: Fn(&FramePoses) -> nalgebra::OMatrix<f64, nalgebra::Const<R>, nalgebra::Dyn>,
    {
        match &self.ahead {
            Some(ahead) => ((jac_at(ahead) - current) * v) * (self.speed / JDOT_STEP),
            None => SVector::zeros(),
        }
    }
}

/// One term's contribution in task space.
struct TermOutput {
    jac: DMatrix<f64>,
    metric: DMatrix<f64>,
    /// `f − J̇q̇`
    rhs: DVector<f64>,
}

fn attractor_accel(kind: TermKind, err: &DVector<f64>, xdot: &DVector<f64>, stiffness: f64, damping: f64) -> DVector<f64> {
    match kind {
        TermKind::Geometric => {
            let grad_norm = err.norm().max(GRADIENT_EPS);
            err * (-stiffness * xdot.norm_squared() / grad_norm)
        }
        TermKind::Forcing => -(err * stiffness) - xdot * damping,
    }
}

/// Barrier acceleration and metric weight for clearance `d` and its rate.
/// Returns `None` outside the activation distance.
fn barrier(term: &FabricTerm, d: f64, d_dot: f64, damping: f64) -> Option<(f64, f64)> {
    if d >= term.activation {
        return None;
    }
    let d = d.max(MIN_DISTANCE);
    let weight = term.metric_weight * (1.0 / d - 1.0 / term.activation);
    let accel = match term.kind {
        // HD2 push, only while approaching
        TermKind::Geometric => {
            if d_dot < 0.0 {
                term.stiffness * d_dot * d_dot / d
            } else {
                0.0
            }
        }
        TermKind::Forcing => term.stiffness / (d * d + BARRIER_EPS) - damping * d_dot.min(0.0),
    };
    Some((accel, weight))
}

fn palm_world_target(config: &FabricConfig, targets: &FabricTargets) -> Isometry3<f64> {
    let rot = config.palm_reference * UnitQuaternion::from_scaled_axis(targets.palm_rotation_coords());
    Isometry3::from_parts(targets.palm_position().into(), rot)
}

/// Position error and orientation error (rotation vector taking the target to
/// the current orientation) of the palm.
pub fn palm_error(palm: &Isometry3<f64>, target: &Isometry3<f64>) -> Vector6<f64> {
    let lin = palm.translation.vector - target.translation.vector;
    let ang = (palm.rotation * target.rotation.inverse()).scaled_axis();
    let mut e = Vector6::zeros();
    e.fixed_rows_mut::<3>(0).copy_from(&lin);
    e.fixed_rows_mut::<3>(3).copy_from(&ang);
    e
}

fn sphere_pair_jacobian(model: &RobotModel, poses: &FramePoses, i: usize, j: usize) -> (f64, RowDVector<f64>) {
    let (si, sj) = (&model.collision_spheres()[i], &model.collision_spheres()[j]);
    let ci = point_in_world(poses, si.frame, &si.offset);
    let cj = point_in_world(poses, sj.frame, &sj.offset);
    let delta = ci - cj;
    let dist = delta.norm();
    let n = if dist > 0.0 { delta / dist } else { Vector3::x() };
    let ji = point_jacobian(model, poses, si.frame, &si.offset);
    let jj = point_jacobian(model, poses, sj.frame, &sj.offset);
    let lin = ji.fixed_rows::<3>(0) - jj.fixed_rows::<3>(0);
    (dist - si.radius - sj.radius, n.transpose() * lin)
}

/// Clearance between two collision spheres at a configuration (m; negative on overlap).
pub fn sphere_clearance(model: &RobotModel, poses: &FramePoses, i: usize, j: usize) -> f64 {
    let (si, sj) = (&model.collision_spheres()[i], &model.collision_spheres()[j]);
    let ci = point_in_world(poses, si.frame, &si.offset);
    let cj = point_in_world(poses, sj.frame, &sj.offset);
    (ci - cj).norm() - si.radius - sj.radius
}

fn palm_jacobian(model: &RobotModel, poses: &FramePoses, palm: usize) -> Matrix6xX<f64> {
    point_jacobian(model, poses, palm, &Vector3::zeros())
}

fn evaluate_term(
    term: &FabricTerm,
    ctx: &KinematicContext,
    basis: Option<&PcaBasis>,
    config: &FabricConfig,
    state: &FabricState,
    targets: &FabricTargets,
) -> Result<Option<TermOutput>, FabricError> {
    let model = ctx.model;
    let n = model.dof();
    let damping = term.damping.unwrap_or(config.damping_gain);
    let v = &state.v;
    let out = match term.map {
        TaskMap::JointSpace => {
            let err = &state.q - &config.nominal_posture;
            let f = attractor_accel(term.kind, &err, v, term.stiffness, damping);
            TermOutput {
                jac: DMatrix::identity(n, n),
                metric: DMatrix::identity(n, n) * term.metric_weight,
                rhs: f,
            }
        }
        TaskMap::PalmPose => {
            let palm = model.frame_id("palm")?;
            let jac = palm_jacobian(model, &ctx.poses, palm);
            let err = DVector::from_column_slice(palm_error(ctx.poses.get(palm), &palm_world_target(config, targets)).as_slice());
            let xdot = DVector::from_column_slice((&jac * v).as_slice());
            let f = attractor_accel(term.kind, &err, &xdot, term.stiffness, damping);
            let jdot = ctx.jdot_qdot(v, |p| palm_jacobian(model, p, palm), &jac);
            let mut metric = DMatrix::identity(6, 6) * term.metric_weight;
            for r in 3..6 {
                metric[(r, r)] *= term.rotation_weight;
            }
            TermOutput {
                jac: DMatrix::from_column_slice(6, n, jac.as_slice()),
                metric,
                rhs: f - DVector::from_column_slice(jdot.as_slice()),
            }
        }
        TaskMap::PcaSpace => {
            let basis = basis.ok_or(FabricError::MissingBasis)?;
            if n != ARM_DOF + HAND_DOF {
                return Err(FabricError::Kinematics(KinematicsError::DimensionMismatch {
                    expected: ARM_DOF + HAND_DOF,
                    got: n,
                }));
            }
            let mut jac = DMatrix::zeros(PCA_DIM, n);
            jac.view_mut((0, ARM_DOF), (PCA_DIM, HAND_DOF)).copy_from(basis.projection());
            let q_hand = SVector::<f64, HAND_DOF>::from_iterator(state.q.rows(ARM_DOF, HAND_DOF).iter().copied());
            let x = basis.hand_to_pca(&q_hand);
            let target = basis.clamp_coords(&targets.pca);
            let err = DVector::from_column_slice((x - target).as_slice());
            let xdot = &jac * v;
            let f = attractor_accel(term.kind, &err, &xdot, term.stiffness, damping);
            TermOutput {
                jac,
                metric: DMatrix::identity(PCA_DIM, PCA_DIM) * term.metric_weight,
                rhs: f,
            }
        }
        TaskMap::JointLimit(k) => {
            let joint = &model.joints()[k];
            let (d_lo, d_hi) = (state.q[k] - joint.lo, joint.hi - state.q[k]);
            // clearance from the nearer limit; its gradient points away from it
            let (d, sign) = if d_lo <= d_hi { (d_lo, 1.0) } else { (d_hi, -1.0) };
            let d_dot = sign * v[k];
            let Some((accel, weight)) = barrier(term, d, d_dot, damping) else {
                return Ok(None);
            };
            let mut jac = DMatrix::zeros(1, n);
            jac[(0, k)] = sign;
            TermOutput {
                jac,
                metric: DMatrix::from_element(1, 1, weight),
                rhs: DVector::from_element(1, accel),
            }
        }
        TaskMap::SpherePair(i, j) => {
            let (d, jac) = sphere_pair_jacobian(model, &ctx.poses, i, j);
            if d >= term.activation {
                return Ok(None);
            }
            let d_dot = (&jac * v)[0];
            let Some((accel, weight)) = barrier(term, d, d_dot, damping) else {
                return Ok(None);
            };
            let jdot = match &ctx.ahead {
                Some(ahead) => {
                    let (_, jac_ahead) = sphere_pair_jacobian(model, ahead, i, j);
                    ((jac_ahead - &jac) * v)[0] * (ctx.speed / JDOT_STEP)
                }
                None => 0.0,
            };
            TermOutput {
                jac: DMatrix::from_row_slice(1, n, jac.as_slice()),
                metric: DMatrix::from_element(1, 1, weight),
                rhs: DVector::from_element(1, accel - jdot),
            }
        }
    };
    if out.rhs.iter().chain(out.metric.iter()).chain(out.jac.iter()).any(|x| !x.is_finite()) {
        return Err(FabricError::NonFinite(term.name.clone()));
    }
    Ok(Some(out))
}

/// Resolved acceleration plus diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub accel: DVector<f64>,
    pub active_barriers: usize,
}

/// Net fabric acceleration `(Σ JᵀMJ)⁻¹ Σ JᵀM(f − J̇q̇)` over all active terms.
pub fn resolve_acceleration(
    model: &RobotModel,
    basis: Option<&PcaBasis>,
    config: &FabricConfig,
    state: &FabricState,
    targets: &FabricTargets,
) -> Result<DVector<f64>, FabricError> {
    resolve_detailed(model, basis, config, state, targets).map(|r| r.accel)
}

pub fn resolve_detailed(
    model: &RobotModel,
    basis: Option<&PcaBasis>,
    config: &FabricConfig,
    state: &FabricState,
    targets: &FabricTargets,
) -> Result<Resolution, FabricError> {
    let n = model.dof();
    for len in [state.q.len(), state.v.len()] {
        if len != n {
            return Err(KinematicsError::DimensionMismatch { expected: n, got: len }.into());
        }
    }
    if !targets.is_finite() {
        return Err(FabricError::NonFiniteTargets);
    }
    let need_poses = config
        .terms
        .iter()
        .any(|t| matches!(t.map, TaskMap::PalmPose | TaskMap::SpherePair(..)));
    let ctx = KinematicContext::new(model, &state.q, &state.v, need_poses)?;
    let mut lhs = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut active_barriers = 0;
    for term in &config.terms {
        let Some(out) = evaluate_term(term, &ctx, basis, config, state, targets)? else {
            continue;
        };
        if term.map.is_barrier() {
            active_barriers += 1;
        }
        let jt_m = out.jac.transpose() * &out.metric;
        lhs += &jt_m * &out.jac;
        rhs += jt_m * out.rhs;
    }
    let chol = lhs.cholesky().ok_or(FabricError::SingularMetric)?;
    let accel = chol.solve(&rhs);
    if accel.iter().any(|x| !x.is_finite()) {
        return Err(FabricError::NonFinite("resolve".into()));
    }
    Ok(Resolution { accel, active_barriers })
}

/// Clamps each component first into `a_prev ± jerk_limit·dt`, then into
/// `±accel_limit`. Inputs already within both bounds pass through unchanged.
pub fn apply_limits(a_raw: &DVector<f64>, a_prev: &DVector<f64>, accel_limit: f64, jerk_limit: f64, dt: f64) -> DVector<f64> {
    let max_delta = jerk_limit * dt;
    a_raw.zip_map(a_prev, |a, prev| {
        a.clamp(prev - max_delta, prev + max_delta).clamp(-accel_limit, accel_limit)
    })
}

/// Midpoint step under constant acceleration, then a hard clamp into
/// `[lo, hi]` that zeroes the velocity of clamped joints. Returns the number of
/// clamped joints.
pub fn integrate(
    q: &DVector<f64>,
    v: &DVector<f64>,
    a: &DVector<f64>,
    h: f64,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, usize) {
    let v_mid = v + a * (0.5 * h);
    let mut q = q + v_mid * h;
    let mut v = v + a * h;
    let mut clamped = 0;
    for k in 0..q.len() {
        if q[k] < lo[k] || q[k] > hi[k] {
            q[k] = q[k].clamp(lo[k], hi[k]);
            v[k] = 0.0;
            clamped += 1;
        }
    }
    (q, v, clamped)
}

/// Telemetry from one control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub state: FabricState,
    pub pd_target: PdTarget,
    /// Maximum over substeps.
    pub active_barriers: usize,
    pub clamped_joints: usize,
    /// Limited acceleration applied in each substep.
    pub substep_accels: Vec<DVector<f64>>,
}

/// One control tick: `substeps` rounds of resolve, limit and midpoint
/// integration, then a hard clamp into the joint limits.
pub fn step(
    model: &RobotModel,
    basis: Option<&PcaBasis>,
    config: &FabricConfig,
    state: &FabricState,
    targets: &FabricTargets,
) -> Result<(FabricState, PdTarget), FabricError> {
    step_detailed(model, basis, config, state, targets).map(|r| (r.state, r.pd_target))
}

pub fn step_detailed(
    model: &RobotModel,
    basis: Option<&PcaBasis>,
    config: &FabricConfig,
    state: &FabricState,
    targets: &FabricTargets,
) -> Result<StepReport, FabricError> {
    let h = config.substep();
    let (lo, hi) = (model.lower_limits(), model.upper_limits());
    let mut s = state.clone();
    let mut active_barriers = 0;
    let mut clamped_joints = 0;
    let mut substep_accels = Vec::with_capacity(config.substeps);
    for _ in 0..config.substeps {
        let res = resolve_detailed(model, basis, config, &s, targets)?;
        active_barriers = active_barriers.max(res.active_barriers);
        let a = apply_limits(&res.accel, &s.a_prev, config.accel_limit, config.jerk_limit, h);
        let (q, v, clamped) = integrate(&s.q, &s.v, &a, h, &lo, &hi);
        clamped_joints += clamped;
        substep_accels.push(a.clone());
        s = FabricState { q, v, a_prev: a };
    }
    let pd_target = PdTarget {
        q_des: s.q.clone(),
        v_des: &s.v * config.pd_velocity_scale,
    };
    Ok(StepReport {
        state: s,
        pd_target,
        active_barriers,
        clamped_joints,
        substep_accels,
    })
}

/// A fabric bound to its model, PCA basis and configuration.
#[derive(Debug, Clone)]
pub struct Fabric {
    model: Arc<RobotModel>,
    basis: Option<Arc<PcaBasis>>,
    config: FabricConfig,
}

impl Fabric {
    pub fn new(model: Arc<RobotModel>, basis: Option<Arc<PcaBasis>>, config: FabricConfig) -> Self {
        Fabric { model, basis, config }
    }

    /// Reference robot, shipped basis and shipped configuration.
    pub fn reference() -> Self {
        let model = Arc::new(RobotModel::reference());
        let basis = Arc::new(PcaBasis::reference(model.hand_joints()));
        let config = FabricConfig::reference(&model);
        Fabric::new(model, Some(basis), config)
    }

    pub fn model(&self) -> &Arc<RobotModel> {
        &self.model
    }

    pub fn basis(&self) -> Option<&Arc<PcaBasis>> {
        self.basis.as_ref()
    }

    pub fn config(&self) -> &FabricConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut FabricConfig {
        &mut self.config
    }

    pub fn set_runtime_gain(&mut self, gain: RuntimeGain, value: f64) -> Result<(), FabricError> {
        self.config = self.config.set_runtime_gain(gain, value)?;
        Ok(())
    }

    pub fn initial_state(&self) -> FabricState {
        FabricState::at_rest(self.config.nominal_posture.clone())
    }

    pub fn resolve(&self, state: &FabricState, targets: &FabricTargets) -> Result<DVector<f64>, FabricError> {
        resolve_acceleration(&self.model, self.basis.as_deref(), &self.config, state, targets)
    }

    pub fn step(&self, state: &FabricState, targets: &FabricTargets) -> Result<StepReport, FabricError> {
        step_detailed(&self.model, self.basis.as_deref(), &self.config, state, targets)
    }

    /// Targets that hold the current palm pose and hand synergy coordinates.
    pub fn targets_at(&self, q: &DVector<f64>) -> Result<FabricTargets, FabricError> {
        let poses = forward_kinematics(&self.model, q)?;
        let palm = poses.by_name(&self.model, "palm")?;
        let rel = self.config.palm_reference.inverse() * palm.rotation;
        let mut palm_pose = Vector6::zeros();
        palm_pose.fixed_rows_mut::<3>(0).copy_from(&palm.translation.vector);
        palm_pose.fixed_rows_mut::<3>(3).copy_from(&rel.scaled_axis());
        let pca = match &self.basis {
            Some(b) if q.len() == ARM_DOF + HAND_DOF => {
                b.hand_to_pca(&SVector::from_iterator(q.rows(ARM_DOF, HAND_DOF).iter().copied()))
            }
            _ => PcaCoords::zeros(),
        };
        Ok(FabricTargets { palm_pose, pca })
    }
}
