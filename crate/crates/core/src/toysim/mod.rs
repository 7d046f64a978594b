//! Desk-scale kinematic grasping environment.
//!
//! The robot tracks the fabric's PD targets through a first-order lag. The
//! object is a kinematic sphere: it drops onto the table, slides under the
//! disturbance acceleration against Coulomb friction, and rides rigidly in the
//! palm frame once the grasp heuristic fires. There is no contact simulation.

mod scripted;

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DVector, Isometry3, Point3, SVector, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action_space::{decode_action, Action, ActionBox, PcaBasis, ACTION_DIM};
use crate::adr::{AdrError, AdrSample, AdrState};
use crate::config::{parse_toml, require_finite, ConfigError};
use crate::fabric::{Fabric, FabricError, FabricState, FabricTargets, PdTarget, RuntimeGain};
use crate::kinematics::{forward_kinematics, task_points_from_poses, JointState, RobotModel, ARM_DOF, HAND_DOF, TOTAL_DOF};
use crate::reward::{compute_reward, RewardBreakdown, RewardConfig, RewardFile};

pub use scripted::{GraspPhase, ScriptedGrasp, ScriptedGraspConfig};

pub const TASK_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableConfig {
    pub height: f64,
    pub x: [f64; 2],
    pub y: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub radius: f64,
    pub spawn_center: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspConfig {
    pub radius: f64,
    pub min_points: usize,
    /// Normalized closure the hand must exceed.
    pub closure_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    /// Palm-to-object distance below which the disturbance acts.
    pub activation_distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvFile {
    pub control_rate: f64,
    pub goal: [f64; 3],
    pub lift_height: f64,
    pub max_duration: f64,
    pub hold_success_duration: f64,
    pub one_hot_width: usize,
    pub pd_time_constant: f64,
    pub gravity: f64,
    pub table: TableConfig,
    pub object: ObjectConfig,
    pub grasp: GraspConfig,
    pub disturbance: DisturbanceConfig,
    pub reward: RewardFile,
}

/// Validated environment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub control_rate: f64,
    pub goal: Vector3<f64>,
    pub lift_height: f64,
    pub max_duration: f64,
    pub hold_success_duration: f64,
    pub one_hot_width: usize,
    pub pd_time_constant: f64,
    pub gravity: f64,
    pub table: TableConfig,
    pub object: ObjectConfig,
    pub grasp: GraspConfig,
    pub disturbance: DisturbanceConfig,
    pub reward: RewardConfig,
}

impl EnvConfig {
    pub fn from_text(text: &str, model: &RobotModel) -> Result<EnvConfig, ConfigError> {
        let file: EnvFile = parse_toml(text)?;
        let config = EnvConfig {
            control_rate: file.control_rate,
            goal: Vector3::from(file.goal),
            lift_height: file.lift_height,
            max_duration: file.max_duration,
            hold_success_duration: file.hold_success_duration,
            one_hot_width: file.one_hot_width,
            pd_time_constant: file.pd_time_constant,
            gravity: file.gravity,
            table: file.table,
            object: file.object,
            grasp: file.grasp,
            disturbance: file.disturbance,
            reward: file.reward.into_config(model.hand_joints())?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn reference(model: &RobotModel) -> EnvConfig {
        EnvConfig::from_text(include_str!("../../data/env.toml"), model).expect("shipped env config is valid")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("control_rate", self.control_rate),
            ("lift_height", self.lift_height),
            ("max_duration", self.max_duration),
            ("hold_success_duration", self.hold_success_duration),
            ("pd_time_constant", self.pd_time_constant),
            ("object.radius", self.object.radius),
            ("grasp.radius", self.grasp.radius),
            ("disturbance.activation_distance", self.disturbance.activation_distance),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::invalid(field, "must be positive"));
            }
        }
        require_finite("goal", self.goal.as_slice())?;
        require_finite("gravity", &[self.gravity, self.table.height])?;
        let t = &self.table;
        if !(t.x[0] + 2.0 * self.object.radius < t.x[1] && t.y[0] + 2.0 * self.object.radius < t.y[1]) {
            return Err(ConfigError::invalid("table", "rails leave no room for the object"));
        }
        if !(1..=TASK_POINTS).contains(&self.grasp.min_points) {
            return Err(ConfigError::invalid("grasp.min_points", format!("must be in 1..={TASK_POINTS}")));
        }
        if !(0.0..1.0).contains(&self.grasp.closure_threshold) {
            return Err(ConfigError::invalid("grasp.closure_threshold", "must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.control_rate
    }

    pub fn max_ticks(&self) -> u64 {
        (self.max_duration * self.control_rate).round() as u64
    }

    pub fn hold_ticks_required(&self) -> u32 {
        (self.hold_success_duration * self.control_rate).round() as u32
    }

    /// Resting height of the object centre.
    pub fn rest_z(&self) -> f64 {
        self.table.height + self.object.radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimObject {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub mass_scale: f64,
    pub grasped: bool,
    /// Object pose in the palm frame, fixed at the moment of attachment.
    pub grasp_offset: Isometry3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceState {
    pub active: bool,
    /// Horizontal unit vector drawn at each activation.
    pub direction: Vector3<f64>,
}

/// Half-width of the per-step noise and the per-episode bias of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNoise {
    pub half_width: f64,
    pub bias: DVector<f64>,
}

impl ChannelNoise {
    fn draw(half_width: f64, bias_half_width: f64, dim: usize, rng: &mut impl Rng) -> Self {
        ChannelNoise {
            half_width,
            bias: DVector::from_fn(dim, |_, _| symmetric(rng, bias_half_width)),
        }
    }

    fn perturb(&self, x: &mut [f64], rng: &mut impl Rng) {
        for (v, b) in x.iter_mut().zip(self.bias.iter()) {
            *v += b + symmetric(rng, self.half_width);
        }
    }
}

fn symmetric(rng: &mut impl Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.gen_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// Everything drawn once per episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeParams {
    pub pd_stiffness_scale: f64,
    pub pd_damping_scale: f64,
    pub object_static_friction: f64,
    pub object_dynamic_friction: f64,
    pub disturbance_accel: f64,
    pub object_pos: ChannelNoise,
    pub object_rot: ChannelNoise,
    pub robot_pos: ChannelNoise,
    pub robot_vel: ChannelNoise,
    /// Scale on every velocity and acceleration observation channel.
    pub annealing: f64,
}

impl EpisodeParams {
    /// Effective tracking time constant: a stiffer PD tracks faster, a more damped one slower.
    pub fn time_constant(&self, cfg: &EnvConfig) -> f64 {
        cfg.pd_time_constant * self.pd_damping_scale / self.pd_stiffness_scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub tick: u64,
    pub robot: JointState,
    pub fabric: FabricState,
    pub object: SimObject,
    pub palm: Isometry3<f64>,
    pub task_points: [Vector3<f64>; TASK_POINTS],
    pub task_point_velocities: [Vector3<f64>; TASK_POINTS],
    /// Normalized closure of the measured hand configuration.
    pub closure: f64,
    pub disturbance: DisturbanceState,
    pub hold_ticks: u32,
    pub time_to_lift: Option<f64>,
    pub last_action: Action,
    pub episode: EpisodeParams,
    /// Stream for disturbance directions.
    pub rng: ChaCha8Rng,
}

impl SimState {
    pub fn time(&self, cfg: &EnvConfig) -> f64 {
        self.tick as f64 / cfg.control_rate
    }

    /// Height of the object centre above the table surface.
    pub fn object_height(&self, cfg: &EnvConfig) -> f64 {
        self.object.position.z - cfg.table.height
    }

    pub fn hand_q(&self) -> SVector<f64, HAND_DOF> {
        SVector::from_iterator(self.robot.q.iter().skip(ARM_DOF).copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeMode {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoneReason {
    Success,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: u64,
    pub time_to_lift: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsRole {
    Actor,
    Critic,
}

fn sample(sample: &AdrSample, name: &str) -> Result<f64, AdrError> {
    sample.get(name)
}

fn upper(adr: &AdrState, name: &str) -> Result<f64, AdrError> {
    Ok(adr.current_range(name)?.1)
}

fn poses_summary(model: &RobotModel, basis: &PcaBasis, q: &DVector<f64>) -> (Isometry3<f64>, [Vector3<f64>; TASK_POINTS], f64) {
    let poses = forward_kinematics(model, q).expect("robot model and state dimensions agree");
    let palm = *poses.get(model.task_frames()[0]);
    let pts = task_points_from_poses(model, &poses);
    let points = std::array::from_fn(|i| pts[i]);
    let hand = SVector::<f64, HAND_DOF>::from_iterator(q.iter().skip(ARM_DOF).copied());
    (palm, points, basis.closure(&hand))
}

/// Fresh episode. Physical parameters come from one ADR draw; spawn extents,
/// noise half-widths and initial joint speed use the upper end of the current
/// ranges.
pub fn reset(
    model: &RobotModel,
    basis: &PcaBasis,
    nominal: &DVector<f64>,
    cfg: &EnvConfig,
    adr: &AdrState,
    seed: u64,
) -> Result<SimState, AdrError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = adr.sample_with(&mut rng);
    let width = upper(adr, "object_spawn_width")?;
    let drop = upper(adr, "object_spawn_height")?;
    let [cx, cy] = cfg.object.spawn_center;
    let position = Vector3::new(cx, cy + symmetric(&mut rng, 0.5 * width), cfg.rest_z() + rng.gen_range(0.0..=1.0) * drop);

    let v_max = upper(adr, "robot_init_joint_vel")?;
    let v0 = DVector::from_fn(TOTAL_DOF, |_, _| symmetric(&mut rng, v_max));
    let episode = EpisodeParams {
        pd_stiffness_scale: sample(&draw, "robot_pd_stiffness_scale")?,
        pd_damping_scale: sample(&draw, "robot_pd_damping_scale")?,
        object_static_friction: sample(&draw, "object_static_friction")?,
        object_dynamic_friction: sample(&draw, "object_dynamic_friction")?,
        disturbance_accel: sample(&draw, "object_disturbance_accel")?,
        object_pos: ChannelNoise::draw(upper(adr, "object_pos_noise")?, upper(adr, "object_pos_bias")?, 3, &mut rng),
        object_rot: ChannelNoise::draw(upper(adr, "object_rot_noise")?, upper(adr, "object_rot_bias")?, 3, &mut rng),
        robot_pos: ChannelNoise::draw(upper(adr, "robot_pos_noise")?, upper(adr, "robot_pos_bias")?, TOTAL_DOF, &mut rng),
        robot_vel: ChannelNoise::draw(upper(adr, "robot_vel_noise")?, upper(adr, "robot_vel_bias")?, TOTAL_DOF, &mut rng),
        annealing: adr.scalar("observation_annealing")?,
    };
    let object = SimObject {
        position,
        velocity: Vector3::zeros(),
        rotation: UnitQuaternion::identity(),
        mass_scale: sample(&draw, "object_mass_scale")?,
        grasped: false,
        grasp_offset: Isometry3::identity(),
    };
    let (palm, task_points, closure) = poses_summary(model, basis, nominal);
    Ok(SimState {
        tick: 0,
        robot: JointState { q: nominal.clone(), v: v0.clone() },
        fabric: FabricState { q: nominal.clone(), v: v0, a_prev: DVector::zeros(TOTAL_DOF) },
        object,
        palm,
        task_points,
        task_point_velocities: [Vector3::zeros(); TASK_POINTS],
        closure,
        disturbance: DisturbanceState { active: false, direction: Vector3::x() },
        hold_ticks: 0,
        time_to_lift: None,
        last_action: Action::zeros(),
        episode,
        rng: ChaCha8Rng::seed_from_u64(rng.gen()),
    })
}

/// `true` iff enough task points surround the object and the hand is closed
/// past the threshold.
pub fn grasp_check(state: &SimState, cfg: &EnvConfig) -> bool {
    let near = state
        .task_points
        .iter()
        .filter(|p| (*p - state.object.position).norm() <= cfg.grasp.radius)
        .count();
    near >= cfg.grasp.min_points && state.closure > cfg.grasp.closure_threshold
}

/// Advances robot and object by one control period `dt = 1 / control_rate`.
pub fn step_env(
    model: &RobotModel,
    basis: &PcaBasis,
    cfg: &EnvConfig,
    state: &SimState,
    pd_target: &PdTarget,
) -> SimState {
    let dt = cfg.dt();
    let mut next = state.clone();

    // first-order lag toward the position target, velocity target as feed-forward
    let alpha = 1.0 - (-dt / state.episode.time_constant(cfg)).exp();
    let (lo, hi) = (model.lower_limits(), model.upper_limits());
    let q = &state.robot.q;
    let raw = q + (&pd_target.q_des - q) * alpha + &pd_target.v_des * ((1.0 - alpha) * dt);
    let q_new = raw.zip_zip_map(&lo, &hi, |x, l, h| x.clamp(l, h));
    next.robot.v = (&q_new - q) / dt;
    next.robot.q = q_new;

    let (palm, points, closure) = poses_summary(model, basis, &next.robot.q);
    next.task_point_velocities = std::array::from_fn(|i| (points[i] - state.task_points[i]) / dt);
    next.palm = palm;
    next.task_points = points;
    next.closure = closure;

    let obj = &mut next.object;
    if obj.grasped && closure < cfg.grasp.closure_threshold {
        obj.grasped = false;
    }
    if obj.grasped {
        let pose = palm * obj.grasp_offset;
        let p = pose.translation.vector;
        obj.velocity = (p - obj.position) / dt;
        obj.position = p;
        obj.rotation = pose.rotation;
    } else if grasp_check(&next, cfg) {
        let obj = &mut next.object;
        obj.grasped = true;
        obj.velocity = Vector3::zeros();
        let pose = Isometry3::from_parts(Translation3::from(obj.position), obj.rotation);
        obj.grasp_offset = palm.inverse() * pose;
    } else {
        free_object_step(cfg, &mut next, dt);
    }

    if next.object_height(cfg) >= cfg.lift_height {
        next.hold_ticks += 1;
        next.time_to_lift.get_or_insert((state.tick + 1) as f64 * dt);
    } else {
        next.hold_ticks = 0;
    }
    next.tick += 1;
    next
}

fn free_object_step(cfg: &EnvConfig, state: &mut SimState, dt: f64) {
    let distance = (state.palm.translation.vector - state.object.position).norm();
    let active = distance < cfg.disturbance.activation_distance;
    if active && !state.disturbance.active {
        let theta = state.rng.gen_range(0.0..std::f64::consts::TAU);
        state.disturbance.direction = Vector3::new(theta.cos(), theta.sin(), 0.0);
    }
    state.disturbance.active = active;

    let ep = &state.episode;
    let g = cfg.gravity;
    let push = if active { state.disturbance.direction * ep.disturbance_accel } else { Vector3::zeros() };
    let obj = &mut state.object;
    let rest_z = cfg.rest_z();
    let on_table = obj.position.z <= rest_z && obj.velocity.z <= 0.0;

    let mut horizontal = Vector3::new(obj.velocity.x, obj.velocity.y, 0.0);
    if on_table {
        let speed = horizontal.norm();
        if speed == 0.0 {
            // static friction holds unless the push beats it
            if push.norm() > ep.object_static_friction * g {
                let dir = push.normalize();
                horizontal = (push - dir * (ep.object_dynamic_friction * g)) * dt;
            }
        } else {
            let dir = horizontal / speed;
            let next = horizontal + (push - dir * (ep.object_dynamic_friction * g)) * dt;
            horizontal = if push == Vector3::zeros() && next.dot(&dir) <= 0.0 { Vector3::zeros() } else { next };
        }
        obj.velocity = horizontal;
    } else {
        obj.velocity += (push - Vector3::new(0.0, 0.0, g)) * dt;
    }
    obj.position += obj.velocity * dt;

    if obj.position.z < rest_z {
        obj.position.z = rest_z;
        obj.velocity.z = 0.0;
    }
    let r = cfg.object.radius;
    let t = &cfg.table;
    for (axis, [lo, hi]) in [(0, t.x), (1, t.y)] {
        let clamped = obj.position[axis].clamp(lo + r, hi - r);
        if clamped != obj.position[axis] {
            obj.position[axis] = clamped;
            obj.velocity[axis] = 0.0;
        }
    }
}

/// Why the episode ended, if it did. Teachers always run the full horizon;
/// students also stop once the object has been held up for the hold duration.
pub fn episode_done(state: &SimState, cfg: &EnvConfig, mode: EpisodeMode) -> Option<DoneReason> {
    if mode == EpisodeMode::Student && state.hold_ticks >= cfg.hold_ticks_required() {
        return Some(DoneReason::Success);
    }
    (state.tick >= cfg.max_ticks()).then_some(DoneReason::Timeout)
}

/// Width of each actor observation channel and whether it is a rate channel
/// (scaled by observation annealing).
pub const ACTOR_CHANNELS: [(&str, usize, bool); 12] = [
    ("q", TOTAL_DOF, false),
    ("v", TOTAL_DOF, true),
    ("task_points", 3 * TASK_POINTS, false),
    ("task_point_velocities", 3 * TASK_POINTS, true),
    ("object_position", 3, false),
    ("object_rotation", 3, false),
    ("goal", 3, false),
    ("last_action", ACTION_DIM, false),
    ("fabric_q", TOTAL_DOF, false),
    ("fabric_v", TOTAL_DOF, true),
    ("fabric_a", TOTAL_DOF, true),
    ("object_class", 1, false),
];

/// Privileged channels appended after the exact actor layout.
pub const CRITIC_EXTRA_CHANNELS: [(&str, usize); 4] =
    [("object_velocity", 3), ("grasped", 1), ("joint_torques", TOTAL_DOF), ("fingertip_forces", 3 * TASK_POINTS)];

pub const ACTOR_OBS_DIM: usize = {
    let mut n = 0;
    let mut i = 0;
    while i < ACTOR_CHANNELS.len() {
        n += ACTOR_CHANNELS[i].1;
        i += 1;
    }
    n
};

pub const CRITIC_OBS_DIM: usize = ACTOR_OBS_DIM + 3 + 1 + TOTAL_DOF + 3 * TASK_POINTS;

/// Index range of a named actor channel.
pub fn actor_channel(name: &str) -> Option<Range<usize>> {
    let mut start = 0;
    for (n, w, _) in ACTOR_CHANNELS {
        if n == name {
            return Some(start..start + w);
        }
        start += w;
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub actor_obs: DVector<f64>,
    pub critic_obs: DVector<f64>,
    pub annealing_scale: f64,
}

/// Observation vector for `role`. Actor channels carry per-episode bias plus
/// per-step uniform noise; rate channels are multiplied by the annealing
/// scale. Critic channels are exact.
pub fn observe(
    model: &RobotModel,
    state: &SimState,
    cfg: &EnvConfig,
    rng: &mut impl Rng,
    role: ObsRole,
) -> DVector<f64> {
    let ep = &state.episode;
    let actor = role == ObsRole::Actor;
    let rate = if actor { ep.annealing } else { 1.0 };
    let mut out = Vec::with_capacity(CRITIC_OBS_DIM);

    let mut q: Vec<f64> = state.robot.q.iter().copied().collect();
    let mut v: Vec<f64> = state.robot.v.iter().copied().collect();
    let mut obj_pos: Vec<f64> = state.object.position.iter().copied().collect();
    let mut obj_rot: Vec<f64> = state.object.rotation.scaled_axis().iter().copied().collect();
    let points = if actor {
        ep.robot_pos.perturb(&mut q, rng);
        ep.robot_vel.perturb(&mut v, rng);
        ep.object_pos.perturb(&mut obj_pos, rng);
        ep.object_rot.perturb(&mut obj_rot, rng);
        let poses = forward_kinematics(model, &DVector::from_column_slice(&q)).expect("dimensions agree");
        task_points_from_poses(model, &poses)
    } else {
        state.task_points.to_vec()
    };

    out.extend_from_slice(&q);
    out.extend(v.iter().map(|x| x * rate));
    out.extend(points.iter().flat_map(|p| p.iter().copied()));
    out.extend(state.task_point_velocities.iter().flat_map(|p| p.iter().map(|x| x * rate)));
    out.extend_from_slice(&obj_pos);
    out.extend_from_slice(&obj_rot);
    out.extend(cfg.goal.iter());
    out.extend(state.last_action.iter());
    out.extend(state.fabric.q.iter());
    out.extend(state.fabric.v.iter().map(|x| x * rate));
    out.extend(state.fabric.a_prev.iter().map(|x| x * rate));
    out.extend(std::iter::repeat(1.0).take(cfg.one_hot_width.min(1)));
    out.extend(std::iter::repeat(0.0).take(cfg.one_hot_width.saturating_sub(1)));

    if !actor {
        out.extend(state.object.velocity.iter());
        out.push(if state.object.grasped { 1.0 } else { 0.0 });
        out.extend(std::iter::repeat(0.0).take(TOTAL_DOF + 3 * TASK_POINTS));
    }
    DVector::from_vec(out)
}

pub fn observe_set(model: &RobotModel, state: &SimState, cfg: &EnvConfig, rng: &mut impl Rng) -> ObservationSet {
    ObservationSet {
        actor_obs: observe(model, state, cfg, rng, ObsRole::Actor),
        critic_obs: observe(model, state, cfg, rng, ObsRole::Critic),
        annealing_scale: state.episode.annealing,
    }
}

/// Object position as an actor observation reports it.
pub fn observed_object_position(actor_obs: &DVector<f64>) -> Vector3<f64> {
    let r = actor_channel("object_position").expect("channel exists");
    Vector3::from_column_slice(&actor_obs.as_slice()[r])
}

pub fn observed_fabric_q(actor_obs: &DVector<f64>) -> DVector<f64> {
    let r = actor_channel("fabric_q").expect("channel exists");
    DVector::from_column_slice(&actor_obs.as_slice()[r])
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: ObservationSet,
    pub reward: RewardBreakdown,
    pub done: Option<DoneReason>,
    /// Fabric output of this tick, for telemetry.
    pub pd_target: PdTarget,
    pub active_barriers: usize,
}

/// Fabric plus environment: actions go in, observations and rewards come out.
#[derive(Debug, Clone)]
pub struct ToyEnv {
    fabric: Fabric,
    model: Arc<RobotModel>,
    basis: Arc<PcaBasis>,
    action_box: ActionBox,
    cfg: EnvConfig,
    reward: RewardConfig,
    mode: EpisodeMode,
    state: SimState,
    obs_rng: ChaCha8Rng,
}

impl ToyEnv {
    pub fn new(fabric: Fabric, cfg: EnvConfig, mode: EpisodeMode) -> Result<ToyEnv, FabricError> {
        let model = fabric.model().clone();
        let basis = fabric.basis().ok_or(FabricError::MissingBasis)?.clone();
        let action_box = ActionBox::reference(&basis);
        let adr = crate::adr::AdrSchedule::reference().state;
        let state = reset(&model, &basis, &fabric.config().nominal_posture, &cfg, &adr, 0).expect("reference schedule has every row");
        Ok(ToyEnv {
            reward: cfg.reward.clone(),
            fabric,
            model,
            basis,
            action_box,
            cfg,
            mode,
            state,
            obs_rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn reference(mode: EpisodeMode) -> ToyEnv {
        let fabric = Fabric::reference();
        let cfg = EnvConfig::reference(fabric.model());
        ToyEnv::new(fabric, cfg, mode).expect("reference fabric has a basis")
    }

    pub fn model(&self) -> &Arc<RobotModel> {
        &self.model
    }

    pub fn basis(&self) -> &Arc<PcaBasis> {
        &self.basis
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn action_box(&self) -> &ActionBox {
        &self.action_box
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut SimState {
        &mut self.state
    }

    pub fn mode(&self) -> EpisodeMode {
        self.mode
    }

    /// Overrides a fabric gain until the next reset.
    pub fn set_runtime_gain(&mut self, gain: RuntimeGain, value: f64) -> Result<(), FabricError> {
        self.fabric.set_runtime_gain(gain, value)
    }

    pub fn set_mode(&mut self, mode: EpisodeMode) {
        self.mode = mode;
    }

    /// Resets the episode and pushes the scalar ADR schedules into the fabric
    /// gains and reward coefficients.
    pub fn reset(&mut self, adr: &AdrState, seed: u64) -> Result<ObservationSet, ToySimError> {
        self.fabric.set_runtime_gain(RuntimeGain::Damping, adr.scalar("fabric_damping")?)?;
        self.fabric.set_runtime_gain(RuntimeGain::PdVelocityScale, adr.scalar("pd_velocity_target")?)?;
        self.reward.beta_obj_goal = adr.scalar("beta_obj_goal")?;
        self.reward.beta_curl = adr.scalar("beta_curl")?;
        let nominal = self.fabric.config().nominal_posture.clone();
        self.state = reset(&self.model, &self.basis, &nominal, &self.cfg, adr, seed)?;
        self.obs_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(self.observe())
    }

    /// New object and episode draw with the robot left where it is.
    pub fn respawn_object(&mut self, adr: &AdrState, seed: u64) -> Result<ObservationSet, ToySimError> {
        let (robot, fabric, tick) = (self.state.robot.clone(), self.state.fabric.clone(), self.state.tick);
        self.reset(adr, seed)?;
        let (palm, task_points, closure) = poses_summary(&self.model, &self.basis, &robot.q);
        self.state.robot = robot;
        self.state.fabric = fabric;
        self.state.tick = tick;
        self.state.palm = palm;
        self.state.task_points = task_points;
        self.state.closure = closure;
        Ok(self.observe())
    }

    pub fn observe(&mut self) -> ObservationSet {
        observe_set(&self.model, &self.state, &self.cfg, &mut self.obs_rng)
    }

    /// Steps with a normalized policy action.
    pub fn step(&mut self, action: &Action) -> Result<StepResult, ToySimError> {
        let targets = decode_action(action, &self.action_box);
        self.advance(&targets, *action)
    }

    /// Steps with fabric targets directly (scripted and manual control).
    pub fn step_targets(&mut self, targets: &FabricTargets) -> Result<StepResult, ToySimError> {
        let action = crate::action_space::encode_action(targets, &self.action_box);
        self.advance(targets, action)
    }

    fn advance(&mut self, targets: &FabricTargets, action: Action) -> Result<StepResult, ToySimError> {
        let report = self.fabric.step(&self.state.fabric, targets)?;
        let mut next = step_env(&self.model, &self.basis, &self.cfg, &self.state, &report.pd_target);
        next.fabric = report.state;
        next.last_action = action;
        self.state = next;
        let reward = compute_reward(
            &self.reward,
            &self.state.task_points,
            &self.state.hand_q(),
            &self.state.object.position,
            &self.cfg.goal,
        );
        Ok(StepResult {
            obs: self.observe(),
            reward,
            done: episode_done(&self.state, &self.cfg, self.mode),
            pd_target: report.pd_target,
            active_barriers: report.active_barriers,
        })
    }

    pub fn outcome(&self) -> EpisodeOutcome {
        let success = match self.mode {
            EpisodeMode::Student => self.state.hold_ticks >= self.cfg.hold_ticks_required(),
            EpisodeMode::Teacher => self.state.hold_ticks > 0,
        };
        EpisodeOutcome { success, steps: self.state.tick, time_to_lift: if success { self.state.time_to_lift } else { None } }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ToySimError {
    #[error(transparent)]
    Adr(#[from] AdrError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// World position of a palm-frame point.
pub fn palm_point(palm: &Isometry3<f64>, local: &Vector3<f64>) -> Vector3<f64> {
    (palm * Point3::from(*local)).coords
}
