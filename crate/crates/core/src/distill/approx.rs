//! Trainable toy approximators and their text checkpoints.
//!
//! Parameters are flattened matrix by matrix in column-major order.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_dim, DistillError, GaussianAction, Policy, PolicyOutput, Trainable};

fn take(params: &DVector<f64>, at: &mut usize, rows: usize, cols: usize) -> DMatrix<f64> {
    let m = DMatrix::from_column_slice(rows, cols, &params.as_slice()[*at..*at + rows * cols]);
    *at += rows * cols;
    m
}

fn pack(parts: &[&DMatrix<f64>]) -> DVector<f64> {
    DVector::from_iterator(parts.iter().map(|m| m.len()).sum(), parts.iter().flat_map(|m| m.iter().copied()))
}

fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn aux_column(v: &Vector3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 1, v.as_slice())
}

fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0) * scale)
}

/// `mean = W x + b`, `aux = A x + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub aux_weights: DMatrix<f64>,
    pub aux_bias: Vector3<f64>,
    pub stddev: DVector<f64>,
}

impl LinearPolicy {
    pub fn zeros(input: usize, output: usize, stddev: f64) -> Self {
        LinearPolicy {
            weights: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
            aux_weights: DMatrix::zeros(3, input),
            aux_bias: Vector3::zeros(),
            stddev: DVector::from_element(output, stddev),
        }
    }

    pub fn random(input: usize, output: usize, stddev: f64, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        LinearPolicy {
            weights: uniform_init(rng, output, input, scale),
            bias: DVector::from_fn(output, |_, _| rng.gen_range(-0.1..0.1)),
            aux_weights: uniform_init(rng, 3, input, scale),
            aux_bias: Vector3::from_fn(|_, _| rng.gen_range(-0.1..0.1)),
            stddev: DVector::from_element(output, stddev),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

impl Trainable for LinearPolicy {
    fn forward(&self, obs: &DVector<f64>) -> PolicyOutput {
        let mean = &self.weights * obs + &self.bias;
        let aux = Vector3::from_iterator((&self.aux_weights * obs).iter().copied()) + self.aux_bias;
        PolicyOutput { action: GaussianAction { mean, stddev: self.stddev.clone() }, aux }
    }

    fn params(&self) -> DVector<f64> {
        pack(&[&self.weights, &column(&self.bias), &self.aux_weights, &aux_column(&self.aux_bias)])
    }

    fn set_params(&mut self, params: &DVector<f64>) -> Result<(), DistillError> {
        let (i, o) = (self.input_dim(), self.output_dim());
        check_dim("linear parameters", (o + 3) * (i + 1), params.len())?;
        let mut at = 0;
        self.weights = take(params, &mut at, o, i);
        self.bias = take(params, &mut at, o, 1).column(0).into_owned();
        self.aux_weights = take(params, &mut at, 3, i);
        self.aux_bias = Vector3::from_column_slice(take(params, &mut at, 3, 1).as_slice());
        Ok(())
    }

    fn backward(&self, obs: &DVector<f64>, d_mean: &DVector<f64>, d_aux: &Vector3<f64>) -> DVector<f64> {
        let x = column(obs).transpose();
        pack(&[&(column(d_mean) * &x), &column(d_mean), &(aux_column(d_aux) * &x), &aux_column(d_aux)])
    }
}

impl Policy for LinearPolicy {
    fn act(&mut self, obs: &DVector<f64>) -> PolicyOutput {
        self.forward(obs)
    }
}

/// One tanh hidden layer feeding both the action mean and the aux head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w3: DMatrix<f64>,
    pub b3: Vector3<f64>,
    pub stddev: DVector<f64>,
}

impl MlpPolicy {
    pub const DEFAULT_HIDDEN: usize = 64;

    pub fn random(input: usize, hidden: usize, output: usize, stddev: f64, rng: &mut impl Rng) -> Self {
        let (s1, s2) = (1.0 / (input as f64).sqrt(), 1.0 / (hidden as f64).sqrt());
        MlpPolicy {
            w1: uniform_init(rng, hidden, input, s1),
            b1: DVector::zeros(hidden),
            w2: uniform_init(rng, output, hidden, s2),
            b2: DVector::zeros(output),
            w3: uniform_init(rng, 3, hidden, s2),
            b3: Vector3::zeros(),
            stddev: DVector::from_element(output, stddev),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    fn hidden(&self, obs: &DVector<f64>) -> DVector<f64> {
        (&self.w1 * obs + &self.b1).map(f64::tanh)
    }
}

impl Trainable for MlpPolicy {
    fn forward(&self, obs: &DVector<f64>) -> PolicyOutput {
        let h = self.hidden(obs);
        let mean = &self.w2 * &h + &self.b2;
        let aux = Vector3::from_iterator((&self.w3 * &h).iter().copied()) + self.b3;
        PolicyOutput { action: GaussianAction { mean, stddev: self.stddev.clone() }, aux }
    }

    fn params(&self) -> DVector<f64> {
        pack(&[&self.w1, &column(&self.b1), &self.w2, &column(&self.b2), &self.w3, &aux_column(&self.b3)])
    }

    fn set_params(&mut self, params: &DVector<f64>) -> Result<(), DistillError> {
        let (i, h, o) = (self.input_dim(), self.hidden_dim(), self.output_dim());
        check_dim("mlp parameters", h * (i + 1) + (o + 3) * (h + 1), params.len())?;
        let mut at = 0;
        self.w1 = take(params, &mut at, h, i);
        self.b1 = take(params, &mut at, h, 1).column(0).into_owned();
        self.w2 = take(params, &mut at, o, h);
        self.b2 = take(params, &mut at, o, 1).column(0).into_owned();
        self.w3 = take(params, &mut at, 3, h);
        self.b3 = Vector3::from_column_slice(take(params, &mut at, 3, 1).as_slice());
        Ok(())
    }

    fn backward(&self, obs: &DVector<f64>, d_mean: &DVector<f64>, d_aux: &Vector3<f64>) -> DVector<f64> {
        let h = self.hidden(obs);
        let ht = column(&h).transpose();
        let d_aux = aux_column(d_aux);
        let dh = self.w2.transpose() * d_mean + (self.w3.transpose() * &d_aux).column(0);
        let dz = dh.zip_map(&h, |g, y| g * (1.0 - y * y));
        pack(&[
            &(column(&dz) * column(obs).transpose()),
            &column(&dz),
            &(column(d_mean) * &ht),
            &column(d_mean),
            &(&d_aux * &ht),
            &d_aux,
        ])
    }
}

impl Policy for MlpPolicy {
    fn act(&mut self, obs: &DVector<f64>) -> PolicyOutput {
        self.forward(obs)
    }
}

/// Text checkpoint of a toy approximator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Checkpoint {
    Linear { input: usize, output: usize, stddev: Vec<f64>, params: Vec<f64> },
    Mlp { input: usize, hidden: usize, output: usize, stddev: Vec<f64>, params: Vec<f64> },
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint is plain data")
    }

    pub fn from_text(text: &str) -> Result<Checkpoint, DistillError> {
        serde_json::from_str(text).map_err(|e| DistillError::Checkpoint(e.to_string()))
    }

    pub fn linear(policy: &LinearPolicy) -> Checkpoint {
        Checkpoint::Linear {
            input: policy.input_dim(),
            output: policy.output_dim(),
            stddev: policy.stddev.iter().copied().collect(),
            params: policy.params().iter().copied().collect(),
        }
    }

    pub fn mlp(policy: &MlpPolicy) -> Checkpoint {
        Checkpoint::Mlp {
            input: policy.input_dim(),
            hidden: policy.hidden_dim(),
            output: policy.output_dim(),
            stddev: policy.stddev.iter().copied().collect(),
            params: policy.params().iter().copied().collect(),
        }
    }

    pub fn to_linear(&self) -> Result<LinearPolicy, DistillError> {
        match self {
            Checkpoint::Linear { input, output, stddev, params } => {
                let mut p = LinearPolicy::zeros(*input, *output, 1.0);
                p.stddev = stddev_vector(stddev, *output)?;
                p.set_params(&DVector::from_column_slice(params))?;
                Ok(p)
            }
            Checkpoint::Mlp { .. } => Err(DistillError::Checkpoint("expected a linear checkpoint".into())),
        }
    }

    pub fn to_mlp(&self) -> Result<MlpPolicy, DistillError> {
        match self {
            Checkpoint::Mlp { input, hidden, output, stddev, params } => {
                let mut p = MlpPolicy {
                    w1: DMatrix::zeros(*hidden, *input),
                    b1: DVector::zeros(*hidden),
                    w2: DMatrix::zeros(*output, *hidden),
                    b2: DVector::zeros(*output),
                    w3: DMatrix::zeros(3, *hidden),
                    b3: Vector3::zeros(),
                    stddev: stddev_vector(stddev, *output)?,
                };
                p.set_params(&DVector::from_column_slice(params))?;
                Ok(p)
            }
            Checkpoint::Linear { .. } => Err(DistillError::Checkpoint("expected an mlp checkpoint".into())),
        }
    }
}

fn stddev_vector(stddev: &[f64], output: usize) -> Result<DVector<f64>, DistillError> {
    let g = GaussianAction::new(DVector::zeros(output), DVector::from_column_slice(stddev))?;
    Ok(g.stddev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = LinearPolicy::random(4, 2, 0.1, &mut rng);
        let mut copy = LinearPolicy::zeros(4, 2, 0.1);
        copy.set_params(&lin.params()).unwrap();
        assert_eq!(copy, lin);
        let mlp = MlpPolicy::random(4, 8, 2, 0.1, &mut rng);
        assert_eq!(Checkpoint::from_text(&Checkpoint::mlp(&mlp).to_text()).unwrap().to_mlp().unwrap(), mlp);
        assert_eq!(Checkpoint::from_text(&Checkpoint::linear(&lin).to_text()).unwrap().to_linear().unwrap(), lin);
        assert!(Checkpoint::linear(&lin).to_mlp().is_err());
        assert!(copy.set_params(&DVector::zeros(3)).is_err());
    }
}
