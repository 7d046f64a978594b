//! Hand-coded reach, close, lift controller that only reads actor observations.
//!
//! The object estimate is a moving average of the noisy position channel. A
//! lift is judged successful when the observed height rises with the palm;
//! the per-episode bias cancels in that difference. After a miss the closed
//! hand rakes a lawnmower pattern over the bias box at grasp height, which
//! captures the object wherever the bias put it, then lifts and checks again.

use nalgebra::{DVector, Isometry3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::action_space::{PcaBasis, PcaCoords};
use crate::fabric::FabricTargets;
use crate::kinematics::{forward_kinematics, task_points_from_poses, RobotModel, ARM_DOF};

use super::{observed_fabric_q, observed_object_position, EnvConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedGraspConfig {
    pub grasp_closure: f64,
    pub open_closure: f64,
    /// Extra palm height above the grasp pose while approaching.
    pub hover_clearance: f64,
    /// Weight of each new sample in the object-position average.
    pub ema_weight: f64,
    pub settle_ticks: u32,
    pub close_ticks: u32,
    pub verify_ticks: u32,
    /// Observed rise that counts as a lifted object.
    pub lift_detect: f64,
    pub arrive_tolerance: f64,
    pub phase_timeout_ticks: u32,
    /// Half-extent of the patch swept after a miss, across the sweep lines (x).
    pub search_half_width: f64,
    /// Half-extent along the sweep lines (y); covers the position bias.
    pub search_half_length: f64,
    pub line_spacing: f64,
    /// Palm-target speed along the sweep, m/s.
    pub sweep_speed: f64,
    /// The sweep target waits while the palm trails it by more than this.
    pub sweep_lead: f64,
    /// Palm distance to a sweep corner before the target turns it.
    pub corner_tolerance: f64,
    /// Ticks in the grasp-detection regression during a sweep.
    pub follow_window: usize,
    pub follow_slope: f64,
    /// Minimum RMS palm excursion over the window for the slope to count.
    pub follow_min_spread: f64,
    /// Per-tick integral gain on palm error, active within `trim_radius`.
    pub trim_gain: f64,
    pub trim_radius: f64,
}

impl Default for ScriptedGraspConfig {
    fn default() -> Self {
        ScriptedGraspConfig {
            grasp_closure: 0.6,
            open_closure: 0.15,
            hover_clearance: 0.1,
            ema_weight: 0.05,
            settle_ticks: 45,
            close_ticks: 10,
            verify_ticks: 40,
            lift_detect: 0.12,
            arrive_tolerance: 0.02,
            phase_timeout_ticks: 90,
            search_half_width: 0.12,
            search_half_length: 0.22,
            line_spacing: 0.08,
            sweep_speed: 0.6,
            sweep_lead: 0.25,
            corner_tolerance: 0.05,
            follow_window: 90,
            follow_slope: 0.6,
            follow_min_spread: 0.12,
            trim_gain: 0.05,
            trim_radius: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspPhase {
    Approach,
    Descend,
    Close,
    Lift,
    Verify,
    Sweep,
    Hold,
}

/// Scripted grasp policy. One instance per episode; call [`ScriptedGrasp::restart`]
/// between episodes.
#[derive(Debug, Clone)]
pub struct ScriptedGrasp {
    cfg: ScriptedGraspConfig,
    model: std::sync::Arc<RobotModel>,
    basis: std::sync::Arc<PcaBasis>,
    palm_reference: UnitQuaternion<f64>,
    rest_z: f64,
    /// Object-centre bounds imposed by the table rails, `[x_lo, x_hi, y_lo, y_hi]`.
    rails: [f64; 4],
    goal: Vector3<f64>,
    grasp_coords: PcaCoords,
    open_coords: PcaCoords,
    /// Object centre in the palm frame at which the closed hand holds it.
    grasp_point: Vector3<f64>,
    phase: GraspPhase,
    phase_ticks: u32,
    ticks: u32,
    estimate: Option<Vector3<f64>>,
    verify_base: f64,
    verify_sum: f64,
    /// Spawn line x; the early mean observation against it calibrates the x bias.
    spawn_x: f64,
    calibration_sum: Vector3<f64>,
    x_correction: f64,
    sweep: Vec<Vector3<f64>>,
    sweep_centre: Vector3<f64>,
    sweep_progress: f64,
    sweep_started: bool,
    window: std::collections::VecDeque<(Vector3<f64>, Vector3<f64>)>,
    dt: f64,
    palm: Isometry3<f64>,
    palm_speed: f64,
    closure: f64,
    /// Integral correction for the fabric's steady-state palm error.
    trim: Vector3<f64>,
}

impl ScriptedGrasp {
    pub fn new(
        cfg: ScriptedGraspConfig,
        model: std::sync::Arc<RobotModel>,
        basis: std::sync::Arc<PcaBasis>,
        palm_reference: UnitQuaternion<f64>,
        nominal: &DVector<f64>,
        env: &EnvConfig,
    ) -> Self {
        let grasp_coords = grasp_synergy(&basis, cfg.grasp_closure);
        let open_coords = basis.coords_for_closure(cfg.open_closure);
        let grasp_point = capture_centre(&model, &basis, nominal, &grasp_coords, env.grasp.radius, env.grasp.min_points);
        ScriptedGrasp {
            rest_z: env.rest_z(),
            rails: {
                let (t, r) = (&env.table, env.object.radius);
                [t.x[0] + r, t.x[1] - r, t.y[0] + r, t.y[1] - r]
            },
            goal: env.goal,
            cfg,
            model,
            basis,
            palm_reference,
            grasp_coords,
            open_coords,
            grasp_point,
            phase: GraspPhase::Approach,
            phase_ticks: 0,
            ticks: 0,
            estimate: None,
            verify_base: 0.0,
            verify_sum: 0.0,
            spawn_x: env.object.spawn_center[0],
            calibration_sum: Vector3::zeros(),
            x_correction: 0.0,
            sweep: Vec::new(),
            sweep_centre: Vector3::zeros(),
            sweep_progress: 0.0,
            sweep_started: false,
            window: Default::default(),
            dt: env.dt(),
            palm: Isometry3::identity(),
            palm_speed: 0.0,
            closure: 0.0,
            trim: Vector3::zeros(),
        }
    }

    pub fn restart(&mut self) {
        self.phase = GraspPhase::Approach;
        self.phase_ticks = 0;
        self.ticks = 0;
        self.estimate = None;
        self.calibration_sum = Vector3::zeros();
        self.x_correction = 0.0;
        self.sweep.clear();
        self.sweep_progress = 0.0;
        self.trim = Vector3::zeros();
    }

    pub fn phase(&self) -> GraspPhase {
        self.phase
    }

    pub fn grasp_point(&self) -> Vector3<f64> {
        self.grasp_point
    }

    /// Believed object centre: the palm grasp point once a lift has been
    /// confirmed, the filtered observation otherwise.
    pub fn predicted_object(&self) -> Vector3<f64> {
        match self.phase {
            GraspPhase::Hold => (self.palm * nalgebra::Point3::from(self.grasp_point)).coords,
            _ => self.estimate.map(|e| Vector3::new(e.x + self.x_correction, e.y, self.rest_z)).unwrap_or(self.goal),
        }
    }

    fn palm_for_object(&self, object: &Vector3<f64>) -> Vector3<f64> {
        object - self.palm_reference * self.grasp_point
    }

    /// Moves a palm target so its held point stays inside the rails.
    fn clip_palm(&self, palm: Vector3<f64>) -> Vector3<f64> {
        let [x_lo, x_hi, y_lo, y_hi] = self.rails;
        let mut held = palm + self.palm_reference * self.grasp_point;
        held.x = held.x.clamp(x_lo, x_hi);
        held.y = held.y.clamp(y_lo, y_hi);
        self.palm_for_object(&held)
    }

    fn enter(&mut self, phase: GraspPhase) {
        self.phase = phase;
        self.phase_ticks = 0;
        self.trim = Vector3::zeros();
    }

    fn arrived(&self, target: &Vector3<f64>) -> bool {
        (self.palm.translation.vector - target).norm() < self.cfg.arrive_tolerance
    }

    fn timed_out(&self) -> bool {
        self.phase_ticks >= self.cfg.phase_timeout_ticks
    }

    pub fn act(&mut self, actor_obs: &DVector<f64>) -> FabricTargets {
        let q = observed_fabric_q(actor_obs);
        let poses = forward_kinematics(&self.model, &q).expect("observation carries a full fabric state");
        let palm = *poses.get(self.model.task_frames()[0]);
        self.palm_speed = (palm.translation.vector - self.palm.translation.vector).norm() / self.dt;
        self.palm = palm;
        let hand = nalgebra::SVector::<f64, { crate::kinematics::HAND_DOF }>::from_iterator(q.iter().skip(ARM_DOF).copied());
        self.closure = self.basis.closure(&hand);
        let seen = observed_object_position(actor_obs);
        self.ticks += 1;
        self.phase_ticks += 1;

        if self.phase != GraspPhase::Hold {
            let w = self.cfg.ema_weight;
            self.estimate = Some(match self.estimate {
                None => seen,
                Some(e) => e * (1.0 - w) + seen * w,
            });
        }
        // before the hand is near enough to disturb it the object still lies on the spawn line
        if self.ticks <= self.cfg.settle_ticks {
            self.calibration_sum += seen;
            if self.ticks == self.cfg.settle_ticks {
                self.x_correction = self.spawn_x - self.calibration_sum.x / self.ticks as f64;
            }
        }
        let estimate = self.estimate.unwrap_or(seen) + Vector3::new(self.x_correction, 0.0, 0.0);
        let object_at_rest = Vector3::new(estimate.x, estimate.y, self.rest_z);
        let grasp_palm = self.palm_for_object(&object_at_rest);
        let lift_palm = self.palm_for_object(&self.goal);

        let (palm_target, coords) = match self.phase {
            GraspPhase::Approach => {
                let hover = grasp_palm + Vector3::new(0.0, 0.0, self.cfg.hover_clearance);
                if self.phase_ticks >= self.cfg.settle_ticks && (self.arrived(&hover) || self.timed_out()) {
                    self.enter(GraspPhase::Descend);
                }
                (hover, self.open_coords)
            }
            GraspPhase::Descend => {
                if self.arrived(&grasp_palm) || self.timed_out() {
                    self.verify_base = estimate.z;
                    self.enter(GraspPhase::Close);
                }
                (grasp_palm, self.open_coords)
            }
            GraspPhase::Close => {
                let closed = self.closure >= self.cfg.grasp_closure - 0.02;
                if (closed && self.phase_ticks >= self.cfg.close_ticks) || self.timed_out() {
                    self.enter(GraspPhase::Lift);
                }
                (grasp_palm, self.grasp_coords)
            }
            GraspPhase::Lift => {
                if self.arrived(&lift_palm) || self.timed_out() {
                    self.verify_sum = 0.0;
                    self.enter(GraspPhase::Verify);
                }
                (lift_palm, self.grasp_coords)
            }
            GraspPhase::Verify => {
                self.verify_sum += seen.z;
                if self.phase_ticks >= self.cfg.verify_ticks {
                    let rise = self.verify_sum / self.phase_ticks as f64 - self.verify_base;
                    if rise > self.cfg.lift_detect {
                        self.enter(GraspPhase::Hold);
                    } else {
                        // a false alarm mid-sweep resumes where it left off
                        if self.sweep.is_empty() || along(&self.sweep, self.sweep_progress).1 {
                            self.sweep = self.sweep_path(&object_at_rest);
                            self.sweep_centre = object_at_rest;
                            self.sweep_progress = 0.0;
                        }
                        self.sweep_started = false;
                        self.window.clear();
                        self.enter(GraspPhase::Sweep);
                    }
                }
                (lift_palm, self.grasp_coords)
            }
            GraspPhase::Sweep => {
                if !self.sweep_started {
                    // reach the first waypoint before the carrot starts moving
                    let shift = object_at_rest - self.sweep_centre;
                    let start = self.clip_palm(along(&self.sweep, self.sweep_progress).0 + shift);
                    self.sweep_started = self.arrived(&start) || self.timed_out();
                    if self.sweep_started {
                        self.enter(GraspPhase::Sweep);
                    }
                    (start, self.grasp_coords)
                } else {
                    // the path rides on the live estimate, so it follows a sliding object
                    let shift = object_at_rest - self.sweep_centre;
                    let carrot = self.clip_palm(along(&self.sweep, self.sweep_progress).0 + shift);
                    let palm = self.palm.translation.vector;
                    // advance while the palm keeps up, or once it has stalled short of the carrot
                    let stalled = self.palm_speed < 0.02;
                    if stalled || (carrot - palm).norm() < self.cfg.sweep_lead {
                        let corner = corner_after(&self.sweep, self.sweep_progress);
                        let mut next = self.sweep_progress + self.cfg.sweep_speed * self.dt;
                        // hold at a corner until the palm has rounded it
                        if let Some((at, point)) = corner {
                            let waited = self.phase_ticks >= self.cfg.phase_timeout_ticks;
                            let point = self.clip_palm(point + shift);
                            if next > at && !stalled && !waited && (point - palm).norm() > self.cfg.corner_tolerance {
                                next = at;
                            }
                        }
                        if corner.is_some_and(|(at, _)| self.sweep_progress < at && next >= at) {
                            self.phase_ticks = 0;
                        }
                        self.sweep_progress = next;
                    }
                    let (point, done) = along(&self.sweep, self.sweep_progress);
                    let point = self.clip_palm(point + shift);
                    let held = (self.palm * nalgebra::Point3::from(self.grasp_point)).coords;
                    self.window.push_back((held, seen));
                    if self.window.len() > self.cfg.follow_window {
                        self.window.pop_front();
                    }
                    if done || self.observed_following() {
                        self.enter(GraspPhase::Lift);
                    }
                    (point, self.grasp_coords)
                }
            }
            GraspPhase::Hold => (lift_palm, self.grasp_coords),
        };
        let error = palm_target - self.palm.translation.vector;
        // the sweep deliberately leads the palm; trimming there only winds up
        if self.phase != GraspPhase::Sweep && error.norm() < self.cfg.trim_radius {
            self.trim += error * self.cfg.trim_gain;
            self.trim = self.trim.map(|t| t.clamp(-self.cfg.trim_radius, self.cfg.trim_radius));
        }
        self.targets(palm_target + self.trim, coords)
    }

    fn targets(&self, palm: Vector3<f64>, coords: PcaCoords) -> FabricTargets {
        FabricTargets { palm_pose: Vector6::new(palm.x, palm.y, palm.z, 0.0, 0.0, 0.0), pca: coords }
    }

    /// Palm waypoints of a lawnmower pass over the search patch around `centre`.
    fn sweep_path(&self, centre: &Vector3<f64>) -> Vec<Vector3<f64>> {
        let (w, l) = (self.cfg.search_half_width, self.cfg.search_half_length);
        let [x_lo, x_hi, y_lo, y_hi] = self.rails;
        let (x0, x1) = ((centre.x - w).max(x_lo), (centre.x + w).min(x_hi));
        let (y0, y1) = ((centre.y - l).max(y_lo), (centre.y + l).min(y_hi));
        let lines = ((x1 - x0) / self.cfg.line_spacing).ceil().max(1.0) as usize + 1;
        let step = (x1 - x0) / (lines - 1) as f64;
        // lines nearest the estimate first, alternating outward
        let mut order: Vec<usize> = (0..lines).collect();
        order.sort_by(|&a, &b| {
            let da = (x0 + step * a as f64 - centre.x).abs();
            let db = (x0 + step * b as f64 - centre.x).abs();
            da.total_cmp(&db)
        });
        let mut path = Vec::with_capacity(2 * lines);
        for (k, &i) in order.iter().enumerate() {
            let x = x0 + step * i as f64;
            let (a, b) = if k % 2 == 0 { (y0, y1) } else { (y1, y0) };
            for y in [a, b] {
                path.push(self.palm_for_object(&Vector3::new(x, y, centre.z)));
            }
        }
        path
    }

    /// Regression slope of observed object position on the held-object
    /// position over the window; near 1 once the object rides in the hand.
    fn observed_following(&self) -> bool {
        let n = self.window.len();
        if n < self.cfg.follow_window {
            return false;
        }
        let mean = |f: fn(&(Vector3<f64>, Vector3<f64>)) -> Vector3<f64>| {
            self.window.iter().map(f).sum::<Vector3<f64>>() / n as f64
        };
        let (mh, mo) = (mean(|w| w.0), mean(|w| w.1));
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (h, o) in &self.window {
            let dh = (h - mh).xy();
            sxy += dh.dot(&(o - mo).xy());
            sxx += dh.norm_squared();
        }
        sxx > n as f64 * self.cfg.follow_min_spread.powi(2) && sxy / sxx > self.cfg.follow_slope
    }
}

/// Point at arc length `s` along a polyline and whether the end was reached.
fn along(path: &[Vector3<f64>], s: f64) -> (Vector3<f64>, bool) {
    let mut acc = 0.0;
    for w in path.windows(2) {
        let seg = (w[1] - w[0]).norm();
        if acc + seg >= s {
            return (w[0] + (w[1] - w[0]) * ((s - acc) / seg.max(1e-12)), false);
        }
        acc += seg;
    }
    (*path.last().expect("nonempty path"), true)
}

/// Arc length and position of the first interior waypoint at or beyond `s`.
fn corner_after(path: &[Vector3<f64>], s: f64) -> Option<(f64, Vector3<f64>)> {
    let mut acc = 0.0;
    for w in path.windows(2).take(path.len().saturating_sub(2)) {
        acc += (w[1] - w[0]).norm();
        if acc >= s {
            return Some((acc, w[1]));
        }
    }
    None
}

/// Closure with the outer fingers pulled toward the middle one.
pub(crate) fn grasp_synergy(basis: &PcaBasis, closure: f64) -> PcaCoords {
    let (lo, hi) = basis.coord_bounds();
    let mut c = basis.coords_for_closure(closure);
    c[1] = lo[1];
    c[2] = lo[2] + 0.25 * (hi[2] - lo[2]);
    c[4] = hi[4];
    c
}

/// Centroid of the palm-frame region where the grasp rule would fire for a
/// hand held at `coords`, taken on the grid layer with the largest region.
fn capture_centre(
    model: &RobotModel,
    basis: &PcaBasis,
    nominal: &DVector<f64>,
    coords: &PcaCoords,
    radius: f64,
    min_points: usize,
) -> Vector3<f64> {
    let mut q = nominal.clone();
    q.rows_mut(ARM_DOF, basis.mean().len()).copy_from(&basis.pca_to_hand(coords));
    let poses = forward_kinematics(model, &q).expect("nominal posture is valid");
    let palm = poses.get(model.task_frames()[0]);
    let points: Vec<Vector3<f64>> = task_points_from_poses(model, &poses)
        .iter()
        .map(|p| palm.inverse_transform_point(&nalgebra::Point3::from(*p)).coords)
        .collect();
    let step = 0.005;
    let mut best = (0usize, Vector3::zeros());
    for iz in 0..40 {
        let mut sum = Vector3::zeros();
        let mut count = 0;
        for ix in -40..=40 {
            for iy in -40..=40 {
                let g = Vector3::new(ix as f64 * step, iy as f64 * step, iz as f64 * step);
                if points.iter().filter(|p| (*p - g).norm() <= radius).count() >= min_points {
                    sum += g;
                    count += 1;
                }
            }
        }
        if count > best.0 {
            best = (count, sum / count as f64);
        }
    }
    best.1
}
