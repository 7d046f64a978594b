//! Distillation environments and the scripted teacher.

use nalgebra::{DVector, Vector3};

use super::{check_dim, DistillEnv, DistillError, DistillObs, DistillStep, GaussianAction, Policy, PolicyOutput};
use crate::action_space::{action_from_slice, encode_action, to_dvector, ActionBox, ACTION_DIM};
use crate::adr::AdrState;
use crate::toysim::{DoneReason, ObservationSet, ScriptedGrasp, ScriptedGraspConfig, ToyEnv};

/// A point on a line driven by a velocity action; both policies observe
/// `[x]` and the aux target is `(x, 0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LineEnv {
    pub dt: f64,
    pub episode_steps: u32,
    pub success_radius: f64,
    x: f64,
    t: u32,
}

impl LineEnv {
    pub fn new(dt: f64, episode_steps: u32, success_radius: f64) -> Self {
        LineEnv { dt, episode_steps, success_radius, x: 0.0, t: 0 }
    }

    pub fn position(&self) -> f64 {
        self.x
    }

    fn obs(&self) -> DistillObs {
        let o = DVector::from_element(1, self.x);
        DistillObs { teacher: o.clone(), student: o, object_position: Vector3::new(self.x, 0.0, 0.0) }
    }
}

impl Default for LineEnv {
    fn default() -> Self {
        LineEnv::new(0.1, 8, 0.5)
    }
}

impl DistillEnv for LineEnv {
    fn action_dim(&self) -> usize {
        1
    }

    /// Start drawn uniformly from `[-1, 1]`.
    fn reset(&mut self, seed: u64) -> Result<DistillObs, DistillError> {
        use rand::{Rng, SeedableRng};
        self.x = rand_chacha::ChaCha8Rng::seed_from_u64(seed).gen_range(-1.0..=1.0);
        self.t = 0;
        Ok(self.obs())
    }

    fn step(&mut self, action: &DVector<f64>) -> Result<DistillStep, DistillError> {
        check_dim("line action", 1, action.len())?;
        self.x += self.dt * action[0];
        self.t += 1;
        let done = (self.t >= self.episode_steps).then(|| self.x.abs() < self.success_radius);
        Ok(DistillStep { obs: self.obs(), done })
    }
}

/// The grasping environment seen by distillation: the teacher reads the
/// exact critic observation, the student the noisy actor observation.
#[derive(Debug, Clone)]
pub struct ToySimDistill {
    pub env: ToyEnv,
    pub adr: AdrState,
}

impl ToySimDistill {
    pub fn new(env: ToyEnv, adr: AdrState) -> Self {
        ToySimDistill { env, adr }
    }

    fn split(&self, obs: ObservationSet) -> DistillObs {
        DistillObs { teacher: obs.critic_obs, student: obs.actor_obs, object_position: self.env.state().object.position }
    }
}

impl DistillEnv for ToySimDistill {
    fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    fn reset(&mut self, seed: u64) -> Result<DistillObs, DistillError> {
        let obs = self.env.reset(&self.adr, seed).map_err(|e| DistillError::Env(e.to_string()))?;
        Ok(self.split(obs))
    }

    fn step(&mut self, action: &DVector<f64>) -> Result<DistillStep, DistillError> {
        let a = action_from_slice(action.as_slice()).ok_or(DistillError::Dimension {
            what: "action",
            expected: ACTION_DIM,
            got: action.len(),
        })?;
        let r = self.env.step(&a).map_err(|e| DistillError::Env(e.to_string()))?;
        Ok(DistillStep { done: r.done.map(|d| d == DoneReason::Success), obs: self.split(r.obs) })
    }
}

/// Scripted reach-close-lift controller emitting a fixed-variance Gaussian
/// over normalized actions.
#[derive(Debug, Clone)]
pub struct ScriptedTeacher {
    pub grasp: ScriptedGrasp,
    pub action_box: ActionBox,
    pub stddev: f64,
}

impl ScriptedTeacher {
    pub const DEFAULT_STDDEV: f64 = 0.1;

    pub fn for_env(env: &ToyEnv, stddev: f64) -> Self {
        let fabric = env.fabric().config();
        let grasp = ScriptedGrasp::new(
            ScriptedGraspConfig::default(),
            env.model().clone(),
            env.basis().clone(),
            fabric.palm_reference,
            &fabric.nominal_posture,
            env.config(),
        );
        ScriptedTeacher { grasp, action_box: env.action_box().clone(), stddev }
    }
}

impl Policy for ScriptedTeacher {
    fn act(&mut self, obs: &DVector<f64>) -> PolicyOutput {
        let targets = self.grasp.act(obs);
        let mean = to_dvector(&encode_action(&targets, &self.action_box));
        PolicyOutput {
            action: GaussianAction { mean, stddev: DVector::from_element(ACTION_DIM, self.stddev) },
            aux: self.grasp.predicted_object(),
        }
    }

    fn reset(&mut self) {
        self.grasp.restart();
    }
}
