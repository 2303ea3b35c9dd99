//! State-conditional diffusion model of the behavior policy: noise-prediction
//! training and ancestral (DDPM) sampling with an optional additive guidance slot.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, invalid, numerical, Result};
use crate::math::{float, forward_noise, DiffusionSchedule};
use crate::nn::{
    time_conditioned_input_with, Activation, Checkpointable, FinalActivation, Init, Mlp, MlpSpec, Optimizer,
    OptimizerSpec, TensorMap, TIME_EMBED_DIM,
};
use crate::replay::Batch;
use crate::rng;

/// Bound applied to every intermediate reverse-chain output.
pub const INTERMEDIATE_CLIP: f64 = 1.2;
/// Bound applied to final sampled actions.
pub const ACTION_CLIP: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub optimizer: OptimizerSpec,
    pub train_steps: usize,
    pub batch_size: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 100,
            hidden_dims: vec![64, 64],
            activation: Activation::Silu,
            optimizer: OptimizerSpec::adam(1e-3),
            train_steps: 5_000,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BehaviorModel {
    eps_net: Mlp,
    schedule: DiffusionSchedule,
    optimizer: Optimizer,
    state_dim: usize,
    action_dim: usize,
}

/// `mean_i |pred_i - eps_i|^2` and its gradient with respect to each prediction.
pub fn eps_matching_loss(preds: &[Vec<f64>], eps: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n = preds.len() as f64;
    let mut loss = 0.0;
    let grads = preds
        .iter()
        .zip(eps)
        .map(|(p, e)| {
            p.iter()
                .zip(e)
                .map(|(pi, ei)| {
                    let d = pi - ei;
                    loss += d * d / n;
                    2.0 * d / n
                })
                .collect()
        })
        .collect();
    (loss, grads)
}

impl BehaviorModel {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: &DiffusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let schedule = DiffusionSchedule::vp_linear(config.timesteps)?;
        let spec = MlpSpec::new(
            state_dim + action_dim + TIME_EMBED_DIM,
            &config.hidden_dims,
            action_dim,
            config.activation,
            FinalActivation::None,
        )?;
        let eps_net = Mlp::new(spec, Init::ScaledUniform, rng)?;
        Self::from_parts(eps_net, schedule, config.optimizer, state_dim, action_dim)
    }

    pub fn from_parts(
        eps_net: Mlp,
        schedule: DiffusionSchedule,
        optimizer: OptimizerSpec,
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        check_dims("eps net input", state_dim + action_dim + TIME_EMBED_DIM, eps_net.spec().input_dim)?;
        check_dims("eps net output", action_dim, eps_net.spec().output_dim)?;
        let optimizer = Optimizer::new(optimizer, eps_net.param_count())?;
        Ok(Self { eps_net, schedule, optimizer, state_dim, action_dim })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn eps_net(&self) -> &Mlp {
        &self.eps_net
    }

    pub fn eps_net_mut(&mut self) -> &mut Mlp {
        &mut self.eps_net
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn predict_eps(&self, state: &[f64], a_t: &[f64], t: usize) -> Result<Vec<f64>> {
        check_dims("behavior state", self.state_dim, state.len())?;
        check_dims("behavior action", self.action_dim, a_t.len())?;
        if t >= self.schedule.steps() {
            return Err(invalid(alloc::format!("timestep {t} >= {}", self.schedule.steps())));
        }
        self.eps_net.forward(&time_conditioned_input_with(state, a_t, self.schedule.embedding(t)))
    }

    /// Noise-prediction loss for explicit `(t, eps)` draws, plus its parameter gradient.
    pub fn noise_prediction_loss(
        &self,
        states: &[Vec<f64>],
        actions: &[Vec<f64>],
        ts: &[usize],
        eps: &[Vec<f64>],
    ) -> Result<(f64, Vec<f64>)> {
        if states.is_empty() {
            return Err(invalid("empty batch"));
        }
        let mut tapes = Vec::with_capacity(states.len());
        let mut preds = Vec::with_capacity(states.len());
        for i in 0..states.len() {
            let a_t = forward_noise(&actions[i], ts[i], &eps[i], &self.schedule)?;
            let tape = self.eps_net.forward_tape(&time_conditioned_input_with(&states[i], &a_t, self.schedule.embedding(ts[i])))?;
            preds.push(tape.output().to_vec());
            tapes.push(tape);
        }
        let (loss, out_grads) = eps_matching_loss(&preds, eps);
        let mut grad = vec![0.0; self.eps_net.param_count()];
        for (tape, g) in tapes.iter().zip(&out_grads) {
            self.eps_net.backward(tape, g, &mut grad)?;
        }
        Ok((loss, grad))
    }

    /// One optimizer step of epsilon matching on `batch`; returns the loss.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<f64> {
        let states: Vec<Vec<f64>> = batch.transitions.iter().map(|t| t.state.clone()).collect();
        let actions: Vec<Vec<f64>> = batch.transitions.iter().map(|t| t.action.clone()).collect();
        self.train_on(&states, &actions, rng)
    }

    pub fn train_on<R: Rng + ?Sized>(
        &mut self,
        states: &[Vec<f64>],
        actions: &[Vec<f64>],
        rng: &mut R,
    ) -> Result<f64> {
        let n_steps = self.schedule.steps();
        let mut ts = Vec::with_capacity(states.len());
        let mut eps = Vec::with_capacity(states.len());
        for _ in 0..states.len() {
            ts.push(rng.random_range(0..n_steps));
            eps.push(rng::normal_vec(rng, self.action_dim));
        }
        let (loss, grad) = self.noise_prediction_loss(states, actions, &ts, &eps)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(numerical("behavior loss is not finite; step aborted"));
        }
        self.optimizer.step(self.eps_net.params_mut(), &grad)?;
        Ok(loss)
    }

    /// One ancestral step `a_t -> a_{t-1}` with `eps_hat = eps_net + guidance`,
    /// posterior mean and variance, no noise at `t = 0`.
    pub fn reverse_step<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        a_t: &[f64],
        t: usize,
        guidance: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if t >= self.schedule.steps() {
            return Err(invalid(alloc::format!("timestep {t} >= {}", self.schedule.steps())));
        }
        let mut eps_hat = self.predict_eps(state, a_t, t)?;
        if let Some(g) = guidance {
            check_dims("guidance term", self.action_dim, g.len())?;
            for (e, gi) in eps_hat.iter_mut().zip(g) {
                *e += gi;
            }
        }
        let beta = self.schedule.beta(t);
        let coef = beta / self.schedule.sigma(t);
        let scale = 1.0 / float::sqrt(1.0 - beta);
        let std = float::sqrt(self.schedule.posterior_variance(t));
        let mut out = Vec::with_capacity(self.action_dim);
        for (x, e) in a_t.iter().zip(&eps_hat) {
            let mut v = scale * (x - coef * e);
            if t > 0 {
                v += std * rng::normal(rng);
            }
            if !v.is_finite() {
                return Err(numerical("reverse step produced a non-finite action"));
            }
            out.push(v.clamp(-INTERMEDIATE_CLIP, INTERMEDIATE_CLIP));
        }
        Ok(out)
    }

    /// Full reverse chain from `a_T ~ N(0, I)`; `guidance(a_t, t)` may inject a term
    /// at every step. The result is clipped to the action box.
    pub fn sample_with<R, G>(&self, state: &[f64], rng: &mut R, mut guidance: G) -> Result<Vec<f64>>
    where
        R: Rng + ?Sized,
        G: FnMut(&[f64], usize) -> Result<Option<Vec<f64>>>,
    {
        let mut a = rng::normal_vec(rng, self.action_dim);
        for t in (0..self.schedule.steps()).rev() {
            let g = guidance(&a, t)?;
            a = self.reverse_step(state, &a, t, g.as_deref(), rng)?;
        }
        Ok(a.into_iter().map(|x| x.clamp(-ACTION_CLIP, ACTION_CLIP)).collect())
    }

    pub fn sample_unguided<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.sample_with(state, rng, |_, _| Ok(None))
    }
}

impl Checkpointable for BehaviorModel {
    fn save_tensors(&self, prefix: &str, out: &mut TensorMap) {
        self.eps_net.save_tensors(&alloc::format!("{prefix}.eps_net"), out);
        self.optimizer.save_tensors(&alloc::format!("{prefix}.opt"), out);
    }

    fn load_tensors(&mut self, prefix: &str, map: &TensorMap) -> Result<()> {
        self.eps_net.load_tensors(&alloc::format!("{prefix}.eps_net"), map)?;
        self.optimizer.load_tensors(&alloc::format!("{prefix}.opt"), map)
    }
}
