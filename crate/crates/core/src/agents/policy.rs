//! Actor parameterisations: a tanh-squashed Gaussian for Cal-QL and a
//! tanh-mean Gaussian with free log-std for IQL.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_dims, Result};
use crate::math::float;
use crate::nn::{Activation, Checkpointable, FinalActivation, Init, Mlp, MlpSpec, Tape, Tensor, TensorMap};
use crate::rng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const LN_2: f64 = core::f64::consts::LN_2;

fn actor_init() -> Init {
    Init::Orthogonal { hidden_gain: core::f64::consts::SQRT_2, final_gain: 0.01 }
}

/// `log(1 - tanh(u)^2)`, stable for large `|u|`.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - float::softplus(-2.0 * u))
}

/// A reparameterised draw from a [`SquashedGaussian`], kept for backprop.
#[derive(Debug, Clone)]
pub struct SquashedSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    tape: Tape,
    z: Vec<f64>,
    log_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SquashedGaussian {
    net: Mlp,
    action_dim: usize,
}

impl SquashedGaussian {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden_dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let spec = MlpSpec::new(state_dim, hidden_dims, 2 * action_dim, Activation::Relu, FinalActivation::None)?;
        Ok(Self { net: Mlp::new(spec, actor_init(), rng)?, action_dim })
    }

    pub fn from_net(net: Mlp) -> Self {
        let action_dim = net.spec().output_dim / 2;
        Self { net, action_dim }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn squash_std(raw: f64) -> f64 {
        LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (float::tanh(raw) + 1.0)
    }

    /// Deterministic action `tanh(mean)`.
    pub fn mode(&self, state: &[f64]) -> Result<Vec<f64>> {
        let out = self.net.forward(state)?;
        Ok(out[..self.action_dim].iter().map(|&m| float::tanh(m)).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<SquashedSample> {
        let z = rng::normal_vec(rng, self.action_dim);
        self.sample_with_noise(state, z)
    }

    pub fn sample_with_noise(&self, state: &[f64], z: Vec<f64>) -> Result<SquashedSample> {
        check_dims("policy noise", self.action_dim, z.len())?;
        let tape = self.net.forward_tape(state)?;
        let out = tape.output();
        let (mean, raw) = out.split_at(self.action_dim);
        let log_std: Vec<f64> = raw.iter().map(|&r| Self::squash_std(r)).collect();
        let mut action = Vec::with_capacity(self.action_dim);
        let mut log_prob = 0.0;
        for d in 0..self.action_dim {
            let u = mean[d] + float::exp(log_std[d]) * z[d];
            log_prob += -0.5 * z[d] * z[d] - log_std[d] - HALF_LN_2PI - log_one_minus_tanh_sq(u);
            action.push(float::tanh(u));
        }
        Ok(SquashedSample { action, log_prob, tape, z, log_std })
    }

    /// Accumulates into `grad_params` the gradient of a loss with partials
    /// `g_action` (w.r.t. the squashed action) and `g_log_prob`.
    pub fn backward(
        &self,
        sample: &SquashedSample,
        g_action: &[f64],
        g_log_prob: f64,
        grad_params: &mut [f64],
    ) -> Result<()> {
        check_dims("action gradient", self.action_dim, g_action.len())?;
        let raw = &sample.tape.output()[self.action_dim..];
        let mut g_out = vec![0.0; 2 * self.action_dim];
        for d in 0..self.action_dim {
            let th = sample.action[d];
            let g_u = g_action[d] * (1.0 - th * th) + g_log_prob * 2.0 * th;
            let std = float::exp(sample.log_std[d]);
            let g_log_std = g_u * std * sample.z[d] - g_log_prob;
            let tr = float::tanh(raw[d]);
            g_out[d] = g_u;
            g_out[self.action_dim + d] = g_log_std * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - tr * tr);
        }
        self.net.backward(&sample.tape, &g_out, grad_params)?;
        Ok(())
    }
}

impl Checkpointable for SquashedGaussian {
    fn save_tensors(&self, prefix: &str, out: &mut TensorMap) {
        self.net.save_tensors(prefix, out);
    }

    fn load_tensors(&mut self, prefix: &str, map: &TensorMap) -> Result<()> {
        self.net.load_tensors(prefix, map)
    }
}

/// Gaussian with mean `tanh(net(s))` and a state-independent log-std.
#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    net: Mlp,
    log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden_dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let spec = MlpSpec::new(state_dim, hidden_dims, action_dim, Activation::Relu, FinalActivation::Tanh)?;
        Ok(Self { net: Mlp::new(spec, actor_init(), rng)?, log_std: vec![0.0; action_dim] })
    }

    pub fn from_parts(net: Mlp, log_std: Vec<f64>) -> Result<Self> {
        check_dims("policy log-std", net.spec().output_dim, log_std.len())?;
        Ok(Self { net, log_std })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// Raw log-std parameters; clamped to `[LOG_STD_MIN, LOG_STD_MAX]` on use.
    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        &mut self.log_std
    }

    pub fn mean(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(state)
    }

    /// Mean plus `noise_std` Gaussian noise, clipped to the action box.
    pub fn explore<R: Rng + ?Sized>(&self, state: &[f64], noise_std: f64, rng: &mut R) -> Result<Vec<f64>> {
        let mut a = self.mean(state)?;
        for x in a.iter_mut() {
            *x = (*x + noise_std * rng::normal(rng)).clamp(-1.0, 1.0);
        }
        Ok(a)
    }

    /// A draw from the policy distribution, clipped to the action box.
    pub fn sample<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let mut a = self.mean(state)?;
        for (x, &ls) in a.iter_mut().zip(&self.log_std) {
            let std = float::exp(ls.clamp(LOG_STD_MIN, LOG_STD_MAX));
            *x = (*x + std * rng::normal(rng)).clamp(-1.0, 1.0);
        }
        Ok(a)
    }

    /// `-log pi(action | state)`; accumulates `weight * d/dtheta` into the net
    /// gradient and the log-std gradient.
    pub fn nll_backward(
        &self,
        state: &[f64],
        action: &[f64],
        weight: f64,
        grad_net: &mut [f64],
        grad_log_std: &mut [f64],
    ) -> Result<f64> {
        let tape = self.net.forward_tape(state)?;
        let mean = tape.output();
        check_dims("policy action", mean.len(), action.len())?;
        let mut nll = 0.0;
        let mut g_mean = vec![0.0; mean.len()];
        for d in 0..mean.len() {
            let raw = self.log_std[d];
            let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
            let inv_var = float::exp(-2.0 * ls);
            let diff = action[d] - mean[d];
            nll += 0.5 * diff * diff * inv_var + ls + HALF_LN_2PI;
            g_mean[d] = -weight * diff * inv_var;
            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                grad_log_std[d] += weight * (1.0 - diff * diff * inv_var);
            }
        }
        self.net.backward(&tape, &g_mean, grad_net)?;
        Ok(nll)
    }
}

impl Checkpointable for GaussianPolicy {
    fn save_tensors(&self, prefix: &str, out: &mut TensorMap) {
        self.net.save_tensors(prefix, out);
        out.insert(alloc::format!("{prefix}.log_std"), Tensor::vector(self.log_std.clone()));
    }

    fn load_tensors(&mut self, prefix: &str, map: &TensorMap) -> Result<()> {
        self.net.load_tensors(prefix, map)?;
        let t = Tensor::fetch(map, &alloc::format!("{prefix}.log_std"), &[self.log_std.len()])?;
        self.log_std.copy_from_slice(&t.data);
        Ok(())
    }
}
