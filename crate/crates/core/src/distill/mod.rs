//! Teacher-to-student distillation: the diagonal-Gaussian KL action loss, the
//! auxiliary object-position loss, online DAgger over trainable toy
//! approximators, and the stereo cross-attention mask.
//!
//! The student always drives the environment. At every visited state the
//! teacher is queried on its own observation and the student regresses onto
//! the teacher's action distribution.

mod approx;
mod envs;

pub use approx::{Checkpoint, LinearPolicy, MlpPolicy};
pub use envs::{LineEnv, ScriptedTeacher, ToySimDistill};

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("stddev[{index}] = {value} is not positive")]
    NonpositiveStddev { index: usize, value: f64 },
    #[error("stereo mask needs at least one token per image")]
    EmptyMask,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("environment: {0}")]
    Env(String),
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), DistillError> {
    if expected == got {
        Ok(())
    } else {
        Err(DistillError::Dimension { what, expected, got })
    }
}

/// Diagonal Gaussian over normalized actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianAction {
    pub mean: DVector<f64>,
    pub stddev: DVector<f64>,
}

impl GaussianAction {
    pub fn new(mean: DVector<f64>, stddev: DVector<f64>) -> Result<Self, DistillError> {
        check_dim("stddev", mean.len(), stddev.len())?;
        if let Some((index, &value)) = stddev.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
            return Err(DistillError::NonpositiveStddev { index, value });
        }
        Ok(GaussianAction { mean, stddev })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `KL(student ‖ teacher)` for diagonal Gaussians.
pub fn kl_action_loss(student: &GaussianAction, teacher: &GaussianAction) -> Result<f64, DistillError> {
    check_dim("teacher action", student.dim(), teacher.dim())?;
    let mut kl = 0.0;
    for i in 0..student.dim() {
        let (ss, st) = (student.stddev[i], teacher.stddev[i]);
        let d = student.mean[i] - teacher.mean[i];
        kl += (st / ss).ln() + (ss * ss + d * d) / (2.0 * st * st) - 0.5;
    }
    Ok(kl.max(0.0))
}

/// Gradient of [`kl_action_loss`] with respect to the student mean.
pub fn kl_mean_gradient(student: &GaussianAction, teacher: &GaussianAction) -> DVector<f64> {
    (&student.mean - &teacher.mean).component_div(&teacher.stddev.component_mul(&teacher.stddev))
}

/// Euclidean error of the predicted object position.
pub fn aux_loss(x_hat: &Vector3<f64>, x_obj: &Vector3<f64>) -> f64 {
    (x_hat - x_obj).norm()
}

/// Subgradient of [`aux_loss`] with respect to `x_hat`; zero at the kink.
pub fn aux_gradient(x_hat: &Vector3<f64>, x_obj: &Vector3<f64>) -> Vector3<f64> {
    let d = x_hat - x_obj;
    let n = d.norm();
    if n > 0.0 {
        d / n
    } else {
        Vector3::zeros()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_action: f64,
    pub l_aux: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_action: f64, l_aux: f64) -> Self {
        LossBreakdown { l_action, l_aux, total: l_action + l_aux }
    }
}

/// Attention mask over `[embed, left 1..N, right 1..N]`; `mask[i][j]` means
/// token `i` may attend to token `j`. Image tokens see the embed token and
/// the other image only.
pub fn build_stereo_attention_mask(tokens_per_image: usize) -> Result<Vec<Vec<bool>>, DistillError> {
    if tokens_per_image == 0 {
        return Err(DistillError::EmptyMask);
    }
    let n = tokens_per_image;
    let side = |i: usize| if i == 0 { 0 } else if i <= n { 1 } else { 2 };
    Ok((0..2 * n + 1)
        .map(|i| (0..2 * n + 1).map(|j| side(i) == 0 || side(j) == 0 || side(i) != side(j)).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub action: GaussianAction,
    /// Predicted object position.
    pub aux: Vector3<f64>,
}

/// Observation to action distribution. Scripted policies may keep episode
/// state, cleared by `reset`.
pub trait Policy {
    fn act(&mut self, obs: &DVector<f64>) -> PolicyOutput;
    fn reset(&mut self) {}
}

/// Differentiable policy with a flat parameter vector.
pub trait Trainable {
    fn forward(&self, obs: &DVector<f64>) -> PolicyOutput;
    fn params(&self) -> DVector<f64>;
    fn set_params(&mut self, params: &DVector<f64>) -> Result<(), DistillError>;
    /// Parameter gradient of `d_mean · mean + d_aux · aux` at `obs`.
    fn backward(&self, obs: &DVector<f64>, d_mean: &DVector<f64>, d_aux: &Vector3<f64>) -> DVector<f64>;
}

/// Teacher and student views of one state, plus the aux target.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillObs {
    pub teacher: DVector<f64>,
    pub student: DVector<f64>,
    pub object_position: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillStep {
    pub obs: DistillObs,
    /// `Some(success)` when the episode ended on this step.
    pub done: Option<bool>,
}

pub trait DistillEnv {
    fn action_dim(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<DistillObs, DistillError>;
    fn step(&mut self, action: &DVector<f64>) -> Result<DistillStep, DistillError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSource {
    Student,
    Teacher,
}

/// Which policy produced the action sent to the environment at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionTag {
    pub iteration: u32,
    pub step: u32,
    pub source: ActionSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DaggerConfig {
    pub batch_steps: usize,
    pub learning_rate: f64,
    /// First episode seed; later episodes count up from it.
    pub seed: u64,
    /// Start every batch from fresh episodes at `seed` instead of
    /// continuing the previous batch's episode.
    pub repeat_seeds: bool,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        DaggerConfig { batch_steps: 256, learning_rate: 1e-3, seed: 0, repeat_seeds: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u32,
    /// Batch means, taken before the update.
    pub loss: LossBreakdown,
    pub episodes: u32,
    pub successes: u32,
    pub gradient_norm: f64,
    pub tags: Vec<ActionTag>,
}

/// Online DAgger: student rollouts labelled by a frozen teacher.
pub struct Dagger<E, T, S> {
    pub env: E,
    pub teacher: T,
    pub student: S,
    pub config: DaggerConfig,
    iteration: u32,
    next_seed: u64,
    current: Option<DistillObs>,
}

impl<E: DistillEnv, T: Policy, S: Trainable> Dagger<E, T, S> {
    pub fn new(env: E, teacher: T, student: S, config: DaggerConfig) -> Self {
        Dagger { env, teacher, student, next_seed: config.seed, config, iteration: 0, current: None }
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    fn start_episode(&mut self) -> Result<DistillObs, DistillError> {
        let obs = self.env.reset(self.next_seed)?;
        self.next_seed += 1;
        self.teacher.reset();
        Ok(obs)
    }

    /// One batch of student-driven steps followed by one gradient step on
    /// the batch-mean `l_action + l_aux`.
    pub fn iterate(&mut self) -> Result<IterationMetrics, DistillError> {
        if self.config.repeat_seeds {
            self.next_seed = self.config.seed;
            self.current = None;
        }
        let params = self.student.params();
        let mut grad = DVector::zeros(params.len());
        let (mut l_action, mut l_aux) = (0.0, 0.0);
        let (mut episodes, mut successes) = (0, 0);
        let mut tags = Vec::with_capacity(self.config.batch_steps);
        let mut obs = match self.current.take() {
            Some(obs) => obs,
            None => self.start_episode()?,
        };
        for step in 0..self.config.batch_steps {
            let student = self.student.forward(&obs.student);
            let teacher = self.teacher.act(&obs.teacher);
            l_action += kl_action_loss(&student.action, &teacher.action)?;
            l_aux += aux_loss(&student.aux, &obs.object_position);
            grad += self.student.backward(
                &obs.student,
                &kl_mean_gradient(&student.action, &teacher.action),
                &aux_gradient(&student.aux, &obs.object_position),
            );
            tags.push(ActionTag { iteration: self.iteration, step: step as u32, source: ActionSource::Student });
            let next = self.env.step(&student.action.mean)?;
            obs = match next.done {
                Some(success) => {
                    episodes += 1;
                    successes += u32::from(success);
                    self.start_episode()?
                }
                None => next.obs,
            };
        }
        self.current = Some(obs);
        let n = self.config.batch_steps.max(1) as f64;
        grad /= n;
        self.student.set_params(&(params - &grad * self.config.learning_rate))?;
        let metrics = IterationMetrics {
            iteration: self.iteration,
            loss: LossBreakdown::new(l_action / n, l_aux / n),
            episodes,
            successes,
            gradient_norm: grad.norm(),
            tags,
        };
        self.iteration += 1;
        Ok(metrics)
    }
}
