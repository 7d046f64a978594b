//! Four-term grasp reward: reach, transport, lift and an anti-curl penalty.

use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::{require_finite, ConfigError};
use crate::kinematics::{JointSpec, HAND_DOF};

/// Fixed reach sharpness in `r_hand_obj = exp(-10 d)`.
pub const HAND_OBJ_SHARPNESS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub hand_obj: f64,
    pub obj_goal: f64,
    pub lift: f64,
    pub curl: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            hand_obj: 1.0,
            obj_goal: 2.0,
            lift: 1.0,
            curl: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    /// Positive magnitudes; each formula carries its own minus sign.
    pub beta_obj_goal: f64,
    pub beta_lift: f64,
    pub beta_curl: f64,
    pub weights: RewardWeights,
    pub q_curl: SVector<f64, HAND_DOF>,
}

impl RewardConfig {
    /// Initial ADR coefficients and an open-hand curl reference.
    pub fn with_open_hand(hand_joints: &[JointSpec]) -> Self {
        RewardConfig {
            beta_obj_goal: 15.0,
            beta_lift: 20.0,
            beta_curl: 0.01,
            weights: RewardWeights::default(),
            q_curl: open_hand(hand_joints),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, beta) in [
            ("beta_obj_goal", self.beta_obj_goal),
            ("beta_lift", self.beta_lift),
            ("beta_curl", self.beta_curl),
        ] {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(ConfigError::invalid(format!("reward.{field}"), "must be a positive scalar"));
            }
        }
        let w = &self.weights;
        require_finite("reward.weights", &[w.hand_obj, w.obj_goal, w.lift, w.curl])?;
        require_finite("reward.q_curl", self.q_curl.as_slice())
    }
}

/// Every hand joint at zero flex, clamped into its limits.
pub fn open_hand(hand_joints: &[JointSpec]) -> SVector<f64, HAND_DOF> {
    SVector::from_iterator(hand_joints.iter().map(|j| 0.0f64.clamp(j.lo, j.hi)))
}

/// Serialized form inside the environment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardFile {
    pub beta_obj_goal: f64,
    pub beta_lift: f64,
    pub beta_curl: f64,
    #[serde(default)]
    pub weights: Option<RewardWeights>,
    /// Defaults to the open hand.
    pub q_curl: Option<Vec<f64>>,
}

impl RewardFile {
    pub fn into_config(self, hand_joints: &[JointSpec]) -> Result<RewardConfig, ConfigError> {
        let q_curl = match self.q_curl {
            None => open_hand(hand_joints),
            Some(v) if v.len() == HAND_DOF => SVector::from_vec(v),
            Some(v) => {
                return Err(ConfigError::invalid(
                    "reward.q_curl",
                    format!("expected {HAND_DOF} entries, found {}", v.len()),
                ))
            }
        };
        let config = RewardConfig {
            beta_obj_goal: self.beta_obj_goal,
            beta_lift: self.beta_lift,
            beta_curl: self.beta_curl,
            weights: self.weights.unwrap_or_default(),
            q_curl,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub d_hand_obj: f64,
    pub r_hand_obj: f64,
    pub r_obj_goal: f64,
    pub r_lift: f64,
    pub r_curl: f64,
    pub total: f64,
}

/// Largest distance from any hand task point to the object center.
pub fn hand_obj_distance(points: &[Vector3<f64>], x_obj: &Vector3<f64>) -> f64 {
    points.iter().map(|p| (p - x_obj).norm()).fold(0.0, f64::max)
}

pub fn compute_reward(
    cfg: &RewardConfig,
    points: &[Vector3<f64>],
    q_hand: &SVector<f64, HAND_DOF>,
    x_obj: &Vector3<f64>,
    x_goal: &Vector3<f64>,
) -> RewardBreakdown {
    let d = hand_obj_distance(points, x_obj);
    let r_hand_obj = (-HAND_OBJ_SHARPNESS * d).exp();
    let r_obj_goal = (-cfg.beta_obj_goal * (x_obj - x_goal).norm()).exp();
    let dz = x_obj.z - x_goal.z;
    let r_lift = (-cfg.beta_lift * dz * dz).exp();
    let r_curl = -cfg.beta_curl * (q_hand - cfg.q_curl).norm_squared();
    let w = &cfg.weights;
    RewardBreakdown {
        d_hand_obj: d,
        r_hand_obj,
        r_obj_goal,
        r_lift,
        r_curl,
        total: w.hand_obj * r_hand_obj + w.obj_goal * r_obj_goal + w.lift * r_lift + w.curl * r_curl,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::RobotModel;
    use approx::assert_relative_eq;

    fn config() -> RewardConfig {
        RewardConfig::with_open_hand(RobotModel::reference().hand_joints())
    }

    #[test]
    fn all_terms_at_their_fixed_points() {
        let cfg = config();
        let x = Vector3::new(0.5, 0.1, 0.3);
        let r = compute_reward(&cfg, &[x; 5], &cfg.q_curl, &x, &x);
        assert_eq!((r.r_hand_obj, r.r_obj_goal, r.r_lift, r.r_curl), (1.0, 1.0, 1.0, 0.0));
        let w = cfg.weights;
        assert_eq!(r.total, w.hand_obj + w.obj_goal + w.lift);
    }

    #[test]
    fn distance_is_the_max_over_points() {
        let x = Vector3::new(0.2, -0.1, 0.05);
        let mut points = [x; 5];
        assert_eq!(hand_obj_distance(&points, &x), 0.0);
        points[0] += Vector3::new(0.1, 0.0, 0.0);
        assert_relative_eq!(hand_obj_distance(&points, &x), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn reach_term_at_ten_centimetres() {
        let cfg = config();
        let x = Vector3::zeros();
        let mut points = [x; 5];
        points[3] = Vector3::new(0.0, 0.1, 0.0);
        let r = compute_reward(&cfg, &points, &cfg.q_curl, &x, &x);
        assert_relative_eq!(r.r_hand_obj, 0.36787944117144233, epsilon = 1e-15);
    }

    #[test]
    fn curl_penalty_example() {
        let mut cfg = config();
        cfg.beta_curl = 0.05;
        let mut q = cfg.q_curl;
        q[5] += 2.0;
        let x = Vector3::zeros();
        let r = compute_reward(&cfg, &[x; 5], &q, &x, &x);
        assert_relative_eq!(r.r_curl, -0.2, epsilon = 1e-15);
    }

    #[test]
    fn non_positive_beta_is_rejected() {
        let mut cfg = config();
        cfg.beta_lift = 0.0;
        assert!(cfg.validate().is_err());
        cfg.beta_lift = 20.0;
        cfg.beta_obj_goal = -15.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn open_hand_respects_limits() {
        let model = RobotModel::reference();
        let q = open_hand(model.hand_joints());
        for (v, j) in q.iter().zip(model.hand_joints()) {
            assert!(j.lo <= *v && *v <= j.hi);
        }
    }
}
