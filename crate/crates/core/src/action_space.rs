//! The 11-D policy action space: palm pose (6) + PCA hand synergies (5).
//!
//! Policy outputs live in `[-1, 1]^11` and are mapped affinely onto an
//! [`ActionBox`]. PCA coordinates map to the 16 hand joints through a
//! [`PcaBasis`].

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_toml, require_finite, ConfigError};
use crate::fabric::FabricTargets;
use crate::kinematics::{JointSpec, HAND_DOF};

pub const PCA_DIM: usize = 5;
pub const ACTION_DIM: usize = 6 + PCA_DIM;

pub type PcaCoords = SVector<f64, PCA_DIM>;
pub type Action = SVector<f64, ACTION_DIM>;

/// Linear hand synergy map with per-coordinate bounds and the hand joint
/// limits it clamps into.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    /// Row `i` is the joint-space direction of coordinate `i` (rad per unit).
    basis: SMatrix<f64, PCA_DIM, HAND_DOF>,
    mean: SVector<f64, HAND_DOF>,
    coord_lo: PcaCoords,
    coord_hi: PcaCoords,
    joint_lo: SVector<f64, HAND_DOF>,
    joint_hi: SVector<f64, HAND_DOF>,
    /// Least-squares projection `(B Bᵀ)⁻¹ B`.
    projection: SMatrix<f64, PCA_DIM, HAND_DOF>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PcaFile {
    #[serde(default)]
    description: String,
    basis: Vec<Vec<f64>>,
    mean: Vec<f64>,
    coord_lo: Vec<f64>,
    coord_hi: Vec<f64>,
}

impl PcaBasis {
    pub fn new(
        basis: SMatrix<f64, PCA_DIM, HAND_DOF>,
        mean: SVector<f64, HAND_DOF>,
        coord_lo: PcaCoords,
        coord_hi: PcaCoords,
        hand_joints: &[JointSpec],
    ) -> Result<Self, ConfigError> {
        if hand_joints.len() != HAND_DOF {
            return Err(ConfigError::invalid(
                "hand_joints",
                format!("expected {HAND_DOF} hand joints, found {}", hand_joints.len()),
            ));
        }
        require_finite("basis", basis.as_slice())?;
        require_finite("mean", mean.as_slice())?;
        require_finite("coord_lo", coord_lo.as_slice())?;
        require_finite("coord_hi", coord_hi.as_slice())?;
        if let Some(i) = (0..PCA_DIM).find(|&i| coord_lo[i] >= coord_hi[i]) {
            return Err(ConfigError::invalid(format!("coord_lo[{i}]"), "must be below coord_hi"));
        }
        let gram = basis * basis.transpose();
        let chol = gram
            .cholesky()
            .ok_or_else(|| ConfigError::invalid("basis", "rows are linearly dependent"))?;
        // reject near-degenerate bases as well
        let eig = gram.symmetric_eigenvalues();
        if eig.min() <= 1e-10 * eig.max() {
            return Err(ConfigError::invalid("basis", "rows are linearly dependent"));
        }
        let projection = chol.solve(&basis);
        let joint_lo = SVector::from_iterator(hand_joints.iter().map(|j| j.lo));
        let joint_hi = SVector::from_iterator(hand_joints.iter().map(|j| j.hi));
        Ok(PcaBasis {
            basis,
            mean,
            coord_lo,
            coord_hi,
            joint_lo,
            joint_hi,
            projection,
        })
    }

    /// Parses a basis file and binds it to the given hand joint limits.
    pub fn from_text(text: &str, hand_joints: &[JointSpec]) -> Result<Self, ConfigError> {
        let file: PcaFile = parse_toml(text)?;
        if file.basis.len() != PCA_DIM || file.basis.iter().any(|r| r.len() != HAND_DOF) {
            return Err(ConfigError::invalid("basis", format!("must be a {PCA_DIM}x{HAND_DOF} matrix")));
        }
        let vector = |field: &str, v: &[f64], n: usize| {
            if v.len() == n {
                Ok(())
            } else {
                Err(ConfigError::invalid(field, format!("expected {n} entries, found {}", v.len())))
            }
        };
        vector("mean", &file.mean, HAND_DOF)?;
        vector("coord_lo", &file.coord_lo, PCA_DIM)?;
        vector("coord_hi", &file.coord_hi, PCA_DIM)?;
        let basis = SMatrix::from_fn(|r, c| file.basis[r][c]);
        PcaBasis::new(
            basis,
            SVector::from_column_slice(&file.mean),
            PcaCoords::from_column_slice(&file.coord_lo),
            PcaCoords::from_column_slice(&file.coord_hi),
            hand_joints,
        )
    }

    /// The basis shipped with the crate, bound to the reference hand.
    pub fn reference(hand_joints: &[JointSpec]) -> Self {
        PcaBasis::from_text(include_str!("../data/pca_basis.toml"), hand_joints)
            .expect("shipped PCA basis is valid")
    }

    pub fn to_text(&self, description: &str) -> String {
        let file = PcaFile {
            description: description.to_string(),
            basis: (0..PCA_DIM).map(|r| self.basis.row(r).iter().copied().collect()).collect(),
            mean: self.mean.iter().copied().collect(),
            coord_lo: self.coord_lo.iter().copied().collect(),
            coord_hi: self.coord_hi.iter().copied().collect(),
        };
        toml::to_string(&file).expect("PCA file serializes")
    }

    pub fn basis(&self) -> &SMatrix<f64, PCA_DIM, HAND_DOF> {
        &self.basis
    }

    pub fn mean(&self) -> &SVector<f64, HAND_DOF> {
        &self.mean
    }

    pub fn coord_bounds(&self) -> (&PcaCoords, &PcaCoords) {
        (&self.coord_lo, &self.coord_hi)
    }

    pub fn projection(&self) -> &SMatrix<f64, PCA_DIM, HAND_DOF> {
        &self.projection
    }

    pub fn clamp_coords(&self, c: &PcaCoords) -> PcaCoords {
        c.zip_zip_map(&self.coord_lo, &self.coord_hi, |x, lo, hi| x.clamp(lo, hi))
    }

    /// Hand joint targets for PCA coordinates `c`. Coordinates are clamped to
    /// their bounds first, joints to their limits after.
    pub fn pca_to_hand(&self, c: &PcaCoords) -> SVector<f64, HAND_DOF> {
        let raw = self.mean + self.basis.transpose() * self.clamp_coords(c);
        raw.zip_zip_map(&self.joint_lo, &self.joint_hi, |x, lo, hi| x.clamp(lo, hi))
    }

    /// Least-squares PCA coordinates of a hand configuration (unclamped).
    pub fn hand_to_pca(&self, q_hand: &SVector<f64, HAND_DOF>) -> PcaCoords {
        self.projection * (q_hand - self.mean)
    }

    /// Position of the first (curl) coordinate within its bounds: 0 fully open,
    /// 1 fully closed.
    pub fn closure(&self, q_hand: &SVector<f64, HAND_DOF>) -> f64 {
        self.normalized_closure(&self.hand_to_pca(q_hand))
    }

    pub fn normalized_closure(&self, c: &PcaCoords) -> f64 {
        (c[0] - self.coord_lo[0]) / (self.coord_hi[0] - self.coord_lo[0])
    }

    /// PCA coordinates with the given normalized closure and the remaining
    /// coordinates at their mid-range.
    pub fn coords_for_closure(&self, closure: f64) -> PcaCoords {
        let mut c = (self.coord_lo + self.coord_hi) * 0.5;
        c[0] = self.coord_lo[0] + closure * (self.coord_hi[0] - self.coord_lo[0]);
        c
    }
}

/// Procedurally generated hand-pose family used to build a stand-in basis:
/// global curl, per-finger curl offsets, finger spread, thumb opposition and a
/// proximal/distal flex split. Returns one 16-vector per sample.
pub fn synthetic_hand_poses(hand_joints: &[JointSpec], samples: usize, seed: u64) -> Vec<SVector<f64, HAND_DOF>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let curl: f64 = rng.gen_range(0.0..1.0);
            let spread: f64 = rng.gen_range(-0.25..0.25);
            let split: f64 = rng.gen_range(-0.15..0.15);
            let opposition = (curl + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0);
            let mut q = SVector::<f64, HAND_DOF>::zeros();
            for (k, side) in [1.0, 0.0, -1.0].into_iter().enumerate() {
                let flex = 1.1 * (curl + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0);
                q[4 * k] = side * spread;
                q[4 * k + 1] = flex * (1.0 - split);
                q[4 * k + 2] = flex;
                q[4 * k + 3] = flex * (0.9 + split);
            }
            q[12] = 0.3 + 0.95 * opposition;
            q[13] = 0.35 * opposition;
            q[14] = 0.6 * curl;
            q[15] = 0.6 * curl;
            for (i, j) in hand_joints.iter().enumerate() {
                q[i] = q[i].clamp(j.lo, j.hi);
            }
            q
        })
        .collect()
}

/// Principal components of [`synthetic_hand_poses`]. Component signs are
/// fixed so the first coordinate increases finger flexion.
pub fn synthetic_basis(hand_joints: &[JointSpec], samples: usize, seed: u64) -> Result<PcaBasis, ConfigError> {
    let poses = synthetic_hand_poses(hand_joints, samples, seed);
    let n = poses.len() as f64;
    let mean = poses.iter().fold(SVector::<f64, HAND_DOF>::zeros(), |acc, p| acc + p) / n;
    let centered = DMatrix::from_fn(poses.len(), HAND_DOF, |r, c| poses[r][c] - mean[c]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    // singular values come back sorted in decreasing order
    let mut basis = SMatrix::<f64, PCA_DIM, HAND_DOF>::from_fn(|r, c| v_t[(r, c)]);
    for r in 0..PCA_DIM {
        let sign = if r == 0 {
            basis.row(0).sum().signum()
        } else {
            let (idx, _) = basis.row(r).iamax_full();
            basis[idx].signum()
        };
        basis.row_mut(r).scale_mut(sign);
    }
    let coords: Vec<PcaCoords> = poses.iter().map(|p| basis * (p - mean)).collect();
    let coord_lo = PcaCoords::from_fn(|i, _| coords.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min));
    let coord_hi = PcaCoords::from_fn(|i, _| coords.iter().map(|c| c[i]).fold(f64::NEG_INFINITY, f64::max));
    PcaBasis::new(basis, mean, coord_lo, coord_hi, hand_joints)
}

/// Axis-aligned target box the normalized action is mapped onto.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionBox {
    pub palm_pos_lo: [f64; 3],
    pub palm_pos_hi: [f64; 3],
    /// Exponential coordinates relative to the fabric's reference palm orientation.
    pub palm_rot_lo: [f64; 3],
    pub palm_rot_hi: [f64; 3],
    pub pca_lo: [f64; PCA_DIM],
    pub pca_hi: [f64; PCA_DIM],
}

impl ActionBox {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let (lo, hi) = (self.lower(), self.upper());
        require_finite("action_box", lo.as_slice())?;
        require_finite("action_box", hi.as_slice())?;
        match (0..ACTION_DIM).find(|&i| lo[i] >= hi[i]) {
            Some(i) => Err(ConfigError::invalid(format!("action_box[{i}]"), "empty interval")),
            None => Ok(()),
        }
    }

    /// Workspace box in front of the reference robot: palm over the table,
    /// rotations within about 35 degrees (70 about the vertical) of the
    /// reference orientation, PCA bounds from the basis.
    pub fn reference(basis: &PcaBasis) -> Self {
        ActionBox::with_basis_bounds(([0.3, -0.4, 0.08], [0.8, 0.4, 0.6]), ([-0.6, -0.6, -1.2], [0.6, 0.6, 1.2]), basis)
    }

    /// Box with the given palm bounds and the basis' PCA coordinate bounds.
    pub fn with_basis_bounds(palm_pos: ([f64; 3], [f64; 3]), palm_rot: ([f64; 3], [f64; 3]), basis: &PcaBasis) -> Self {
        let (lo, hi) = basis.coord_bounds();
        ActionBox {
            palm_pos_lo: palm_pos.0,
            palm_pos_hi: palm_pos.1,
            palm_rot_lo: palm_rot.0,
            palm_rot_hi: palm_rot.1,
            pca_lo: (*lo).into(),
            pca_hi: (*hi).into(),
        }
    }

    pub fn lower(&self) -> Action {
        Action::from_iterator(self.palm_pos_lo.iter().chain(&self.palm_rot_lo).chain(&self.pca_lo).copied())
    }

    pub fn upper(&self) -> Action {
        Action::from_iterator(self.palm_pos_hi.iter().chain(&self.palm_rot_hi).chain(&self.pca_hi).copied())
    }

    pub fn center(&self) -> Action {
        (self.lower() + self.upper()) * 0.5
    }

    pub fn contains(&self, targets: &FabricTargets) -> bool {
        let x = targets.to_vector();
        let (lo, hi) = (self.lower(), self.upper());
        (0..ACTION_DIM).all(|i| x[i] >= lo[i] && x[i] <= hi[i])
    }

    pub fn palm_position_center(&self) -> Vector3<f64> {
        Vector3::from(self.palm_pos_lo).zip_map(&Vector3::from(self.palm_pos_hi), |a, b| 0.5 * (a + b))
    }
}

/// Maps a normalized action onto the box; components outside `[-1, 1]` are clamped.
pub fn decode_action(a: &Action, action_box: &ActionBox) -> FabricTargets {
    let lo = action_box.lower();
    let hi = action_box.upper();
    let x = Action::from_fn(|i, _| {
        let u = a[i].clamp(-1.0, 1.0);
        lo[i] + 0.5 * (u + 1.0) * (hi[i] - lo[i])
    });
    FabricTargets::from_vector(&x)
}

/// Inverse of [`decode_action`] on the box.
pub fn encode_action(targets: &FabricTargets, action_box: &ActionBox) -> Action {
    let lo = action_box.lower();
    let hi = action_box.upper();
    let x = targets.to_vector();
    Action::from_fn(|i, _| 2.0 * (x[i] - lo[i]) / (hi[i] - lo[i]) - 1.0)
}

pub fn action_from_slice(values: &[f64]) -> Option<Action> {
    (values.len() == ACTION_DIM).then(|| Action::from_column_slice(values))
}

pub fn to_dvector(a: &Action) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}
