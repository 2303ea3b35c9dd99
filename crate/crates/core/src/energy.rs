//! Contrastive energy network: trained so that `softmax(-f)` over a support set
//! matches `softmax(beta * Q)`, and used to steer the behavior sampler towards
//! high-value actions.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::BehaviorModel;
use crate::error::{check_dims, invalid, numerical, Error, Result};
use crate::math::{forward_noise, log_softmax, self_normalized_weights, DiffusionSchedule};
use crate::nn::{
    time_conditioned_input, time_conditioned_input_with, Activation, Checkpointable, FinalActivation, Init, Mlp, MlpSpec, Optimizer,
    OptimizerSpec, TensorMap, TIME_EMBED_DIM,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub optimizer: OptimizerSpec,
    /// Inverse temperature of the soft labels.
    pub beta: f64,
    pub guidance_scale: f64,
    /// Support actions per state.
    pub support_size: usize,
    pub train_steps: usize,
    pub batch_size: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64, 64],
            activation: Activation::Silu,
            optimizer: OptimizerSpec::adam(3e-4),
            beta: 3.0,
            guidance_scale: 3.0,
            support_size: 16,
            train_steps: 2_000,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnergyNet {
    f_net: Mlp,
    beta: f64,
    guidance_scale: f64,
    support_size: usize,
    optimizer: Optimizer,
    state_dim: usize,
    action_dim: usize,
}

fn softmax_err(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::Numerical(m),
        other => other,
    }
}

impl EnergyNet {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: &EnergyConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = MlpSpec::new(
            state_dim + action_dim + TIME_EMBED_DIM,
            &config.hidden_dims,
            1,
            config.activation,
            FinalActivation::None,
        )?;
        let f_net = Mlp::new(spec, Init::ScaledUniform, rng)?;
        Self::from_parts(f_net, config, state_dim, action_dim)
    }

    pub fn from_parts(f_net: Mlp, config: &EnergyConfig, state_dim: usize, action_dim: usize) -> Result<Self> {
        if !(config.beta >= 0.0) {
            return Err(invalid("energy temperature beta must be non-negative"));
        }
        if !(config.guidance_scale >= 0.0) {
            return Err(invalid("guidance scale must be non-negative"));
        }
        if config.support_size < 2 {
            return Err(invalid("support set needs K >= 2"));
        }
        check_dims("energy net input", state_dim + action_dim + TIME_EMBED_DIM, f_net.spec().input_dim)?;
        check_dims("energy net output", 1, f_net.spec().output_dim)?;
        let optimizer = Optimizer::new(config.optimizer, f_net.param_count())?;
        Ok(Self {
            f_net,
            beta: config.beta,
            guidance_scale: config.guidance_scale,
            support_size: config.support_size,
            optimizer,
            state_dim,
            action_dim,
        })
    }

    pub fn f_net(&self) -> &Mlp {
        &self.f_net
    }

    pub fn f_net_mut(&mut self) -> &mut Mlp {
        &mut self.f_net
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn guidance_scale(&self) -> f64 {
        self.guidance_scale
    }

    pub fn set_guidance_scale(&mut self, s: f64) {
        self.guidance_scale = s;
    }

    pub fn set_beta(&mut self, beta: f64) {
        self.beta = beta;
    }

    pub fn support_size(&self) -> usize {
        self.support_size
    }

    /// Optimizer steps taken so far.
    pub fn steps_taken(&self) -> u64 {
        self.optimizer.steps_taken()
    }

    pub fn energy(&self, state: &[f64], a_t: &[f64], t: usize) -> Result<f64> {
        Ok(self.f_net.forward(&time_conditioned_input(state, a_t, t))?[0])
    }

    fn check_supports(&self, states: &[Vec<f64>], supports: &[Vec<Vec<f64>>], q_values: &[Vec<f64>]) -> Result<()> {
        if states.is_empty() {
            return Err(invalid("no states for the contrastive loss"));
        }
        check_dims("support sets", states.len(), supports.len())?;
        check_dims("support labels", states.len(), q_values.len())?;
        for (sup, q) in supports.iter().zip(q_values) {
            if sup.len() < 2 {
                return Err(invalid("support set needs K >= 2"));
            }
            check_dims("labels per support set", sup.len(), q.len())?;
        }
        Ok(())
    }

    /// Contrastive loss for explicit timesteps and noise draws, with its
    /// parameter gradient.
    ///
    /// `eps[m][k]` noises `supports[m][k]` to level `ts[m]`.
    pub fn cep_loss_at(
        &self,
        states: &[Vec<f64>],
        supports: &[Vec<Vec<f64>>],
        q_values: &[Vec<f64>],
        ts: &[usize],
        eps: &[Vec<Vec<f64>>],
        schedule: &DiffusionSchedule,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_supports(states, supports, q_values)?;
        let m_count = states.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.f_net.param_count()];
        for m in 0..states.len() {
            let scaled: Vec<f64> = q_values[m].iter().map(|q| self.beta * q).collect();
            let target = self_normalized_weights(&scaled).map_err(softmax_err)?;
            let mut tapes = Vec::with_capacity(supports[m].len());
            let mut logits = Vec::with_capacity(supports[m].len());
            for (k, a0) in supports[m].iter().enumerate() {
                let a_t = forward_noise(a0, ts[m], &eps[m][k], schedule)?;
                let tape = self.f_net.forward_tape(&time_conditioned_input_with(&states[m], &a_t, schedule.embedding(ts[m])))?;
                logits.push(-tape.output()[0]);
                tapes.push(tape);
            }
            let log_p = log_softmax(&logits).map_err(softmax_err)?;
            loss -= target.iter().zip(&log_p).map(|(w, lp)| w * lp).sum::<f64>() / m_count;
            for (k, tape) in tapes.iter().enumerate() {
                let p = libm::exp(log_p[k]);
                let d_f = (target[k] - p) / m_count;
                self.f_net.backward(tape, &[d_f], &mut grad)?;
            }
        }
        if !loss.is_finite() {
            return Err(numerical("contrastive loss is not finite"));
        }
        Ok((loss, grad))
    }

    fn draw_noise<R: Rng + ?Sized>(
        &self,
        supports: &[Vec<Vec<f64>>],
        schedule: &DiffusionSchedule,
        rng: &mut R,
    ) -> (Vec<usize>, Vec<Vec<Vec<f64>>>) {
        let mut ts = Vec::with_capacity(supports.len());
        let mut eps = Vec::with_capacity(supports.len());
        for sup in supports {
            ts.push(rng.random_range(0..schedule.steps()));
            eps.push(sup.iter().map(|a| rng::normal_vec(rng, a.len())).collect());
        }
        (ts, eps)
    }

    /// Contrastive loss with one random timestep per state and fresh noise; no update.
    pub fn cep_loss<R: Rng + ?Sized>(
        &self,
        states: &[Vec<f64>],
        supports: &[Vec<Vec<f64>>],
        q_values: &[Vec<f64>],
        schedule: &DiffusionSchedule,
        rng: &mut R,
    ) -> Result<f64> {
        self.check_supports(states, supports, q_values)?;
        let (ts, eps) = self.draw_noise(supports, schedule, rng);
        Ok(self.cep_loss_at(states, supports, q_values, &ts, &eps, schedule)?.0)
    }

    /// One optimizer step on given support actions and their labels.
    pub fn train_on_supports<R: Rng + ?Sized>(
        &mut self,
        states: &[Vec<f64>],
        supports: &[Vec<Vec<f64>>],
        q_values: &[Vec<f64>],
        schedule: &DiffusionSchedule,
        rng: &mut R,
    ) -> Result<f64> {
        self.check_supports(states, supports, q_values)?;
        let (ts, eps) = self.draw_noise(supports, schedule, rng);
        let (loss, grad) = self.cep_loss_at(states, supports, q_values, &ts, &eps, schedule)?;
        self.optimizer.step(self.f_net.params_mut(), &grad)?;
        Ok(loss)
    }

    /// Draws `K` unguided behavior samples per state, labels them with `q` and
    /// takes one optimizer step.
    pub fn energy_train_step<R, Q>(
        &mut self,
        behavior: &BehaviorModel,
        mut q: Q,
        states: &[Vec<f64>],
        rng: &mut R,
    ) -> Result<f64>
    where
        R: Rng + ?Sized,
        Q: FnMut(&[f64], &[f64]) -> Result<f64>,
    {
        let mut supports = Vec::with_capacity(states.len());
        let mut labels = Vec::with_capacity(states.len());
        for s in states {
            let mut sup = Vec::with_capacity(self.support_size);
            let mut lab = Vec::with_capacity(self.support_size);
            for _ in 0..self.support_size {
                let a = behavior.sample_unguided(s, rng)?;
                lab.push(q(s, &a)?);
                sup.push(a);
            }
            supports.push(sup);
            labels.push(lab);
        }
        self.train_on_supports(states, &supports, &labels, behavior.schedule(), rng)
    }

    /// `s * sigma_t * grad_a f(state, a_t, t)`, added to the predicted noise.
    pub fn guidance_term(&self, state: &[f64], a_t: &[f64], t: usize, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        check_dims("guidance action", self.action_dim, a_t.len())?;
        check_dims("guidance state", self.state_dim, state.len())?;
        if self.guidance_scale == 0.0 {
            return Ok(vec![0.0; self.action_dim]);
        }
        if t >= schedule.steps() {
            return Err(invalid(alloc::format!("timestep {t} >= {}", schedule.steps())));
        }
        let tape = self.f_net.forward_tape(&time_conditioned_input_with(state, a_t, schedule.embedding(t)))?;
        let grad = self.f_net.input_grad(&tape, &[1.0])?;
        let scale = self.guidance_scale * schedule.sigma(t);
        let out: Vec<f64> = grad[self.state_dim..self.state_dim + self.action_dim]
            .iter()
            .map(|g| scale * g)
            .collect();
        if out.iter().any(|g| !g.is_finite()) {
            return Err(numerical("energy gradient is not finite"));
        }
        Ok(out)
    }

    /// Reverse chain of `behavior` with the energy guidance injected at every step.
    pub fn sample_guided<R: Rng + ?Sized>(&self, behavior: &BehaviorModel, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        if self.guidance_scale == 0.0 {
            return behavior.sample_unguided(state, rng);
        }
        let schedule = behavior.schedule();
        behavior.sample_with(state, rng, |a_t, t| self.guidance_term(state, a_t, t, schedule).map(Some))
    }
}

impl Checkpointable for EnergyNet {
    fn save_tensors(&self, prefix: &str, out: &mut TensorMap) {
        self.f_net.save_tensors(&alloc::format!("{prefix}.f_net"), out);
        self.optimizer.save_tensors(&alloc::format!("{prefix}.opt"), out);
    }

    fn load_tensors(&mut self, prefix: &str, map: &TensorMap) -> Result<()> {
        self.f_net.load_tensors(&alloc::format!("{prefix}.f_net"), map)?;
        self.optimizer.load_tensors(&alloc::format!("{prefix}.opt"), map)
    }
}
