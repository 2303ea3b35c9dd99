use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::tensors::{Checkpointable, Tensor, TensorMap};
use crate::error::{check_dims, invalid, Result};
use crate::math::float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub algorithm: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerSpec {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            algorithm: OptimizerKind::Adam,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self { algorithm: OptimizerKind::Sgd, ..Self::adam(learning_rate) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be a non-negative finite number"));
        }
        if self.algorithm == OptimizerKind::Adam
            && !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0 && self.epsilon > 0.0)
        {
            return Err(invalid("adam moments need beta1, beta2 in (0, 1) and epsilon > 0"));
        }
        Ok(())
    }
}

/// First-order optimizer with state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    spec: OptimizerSpec,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, n_params: usize) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dims("optimizer parameters", self.m.len(), params.len())?;
        check_dims("optimizer gradients", self.m.len(), grads.len())?;
        let lr = self.spec.learning_rate;
        self.t += 1;
        match self.spec.algorithm {
            OptimizerKind::Sgd => {
                if lr != 0.0 {
                    for (p, g) in params.iter_mut().zip(grads) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.spec.beta1, self.spec.beta2, self.spec.epsilon);
                let bc1 = 1.0 - libm::pow(b1, self.t as f64);
                let bc2 = 1.0 - libm::pow(b2, self.t as f64);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    if lr != 0.0 {
                        let m_hat = self.m[i] / bc1;
                        let v_hat = self.v[i] / bc2;
                        params[i] -= lr * m_hat / (float::sqrt(v_hat) + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

impl Checkpointable for Optimizer {
    fn save_tensors(&self, prefix: &str, out: &mut TensorMap) {
        let n = self.m.len();
        out.insert(alloc::format!("{prefix}.m"), Tensor::new(vec![n], self.m.clone()));
        out.insert(alloc::format!("{prefix}.v"), Tensor::new(vec![n], self.v.clone()));
        out.insert(alloc::format!("{prefix}.t"), Tensor::scalar(self.t as f64));
    }

    fn load_tensors(&mut self, prefix: &str, map: &TensorMap) -> Result<()> {
        let n = self.m.len();
        self.m = Tensor::fetch(map, &alloc::format!("{prefix}.m"), &[n])?.data.clone();
        self.v = Tensor::fetch(map, &alloc::format!("{prefix}.v"), &[n])?.data.clone();
        self.t = Tensor::fetch(map, &alloc::format!("{prefix}.t"), &[])?.data[0] as u64;
        Ok(())
    }
}
