//! Cal-QL and IQL backbones with base and stratified update rules.

mod losses;
mod policy;

pub use losses::{
    awr_loss, awr_weight, calql_critic_base, calql_critic_strat, calql_regularizer_values, iql_targets_base,
    iql_targets_strat, iql_value_adv, iql_value_base, iql_value_strat, q_regression, q_value, reference_value,
    sac_actor_loss, state_action, temperature_loss, CalqlInputs,
};
pub use policy::{log_one_minus_tanh_sq, GaussianPolicy, SquashedGaussian, SquashedSample, LOG_STD_MAX, LOG_STD_MIN};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::BehaviorModel;
use crate::energy::EnergyNet;
use crate::envs::EnvKind;
use crate::error::{check_dims, invalid, numerical, Error, Result};
use crate::math::{float, Expectile};
use crate::nn::{Activation, Checkpointable, FinalActivation, Init, Mlp, MlpSpec, Optimizer, OptimizerSpec, Tensor, TensorMap};
use crate::replay::Batch;
use crate::rng;
use crate::stratify::{Stratum, StratifiedBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    Calql,
    Iql,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub backbone: Backbone,
    /// Weight of the conservative regularizer (Cal-QL).
    pub alpha: f64,
    pub tau_expectile: f64,
    /// Expectile applied to online-like samples.
    pub tau_online: f64,
    pub beta_awr: f64,
    pub awr_clip: f64,
    pub gamma: f64,
    pub polyak: f64,
    /// Offline share of mixed batches and of the offline-like stratum.
    pub rho: f64,
    pub use_stratification: bool,
    pub use_energy_guidance: bool,
    /// Expectile on online-like samples; `false` selects the signed-residual variant.
    pub use_expectile_online: bool,
    /// Per-batch exchange cap; absent means unlimited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_c: Option<usize>,
    pub utd: usize,
    pub max_q_samples: usize,
    /// Cal-QL bootstraps from the best of `max_q_samples` next actions.
    pub max_target_backup: bool,
    /// Policy actions per state in the regularizer.
    pub calibration_samples: usize,
    pub hidden_dims: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub value_lr: f64,
    pub initial_temperature: f64,
    /// Gaussian exploration noise of the IQL actor.
    pub exploration_noise: f64,
}

impl AgentConfig {
    pub fn for_env(backbone: Backbone, env: EnvKind) -> Self {
        let sparse = env.is_sparse();
        let iql = backbone == Backbone::Iql;
        Self {
            backbone,
            alpha: if sparse { 5.0 } else { 10.0 },
            tau_expectile: if sparse { 0.9 } else { 0.7 },
            tau_online: 0.99,
            beta_awr: if sparse { 10.0 } else { 3.0 },
            awr_clip: 100.0,
            gamma: 0.99,
            polyak: 0.005,
            rho: 0.5,
            use_stratification: true,
            use_energy_guidance: true,
            use_expectile_online: true,
            n_c: None,
            utd: 1,
            max_q_samples: 10,
            max_target_backup: sparse,
            calibration_samples: 4,
            hidden_dims: vec![64, 64],
            actor_lr: if iql { 3e-4 } else { 1e-4 },
            critic_lr: 3e-4,
            value_lr: 3e-4,
            initial_temperature: 1.0,
            exploration_noise: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(String::from(m)));
        if !(self.alpha >= 0.0) {
            return fail("alpha must be non-negative");
        }
        for (name, tau) in [("tau_expectile", self.tau_expectile), ("tau_online", self.tau_online)] {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::InvalidConfig(alloc::format!("{name} must lie in (0, 1]")));
            }
        }
        if !(self.beta_awr >= 0.0) || !(self.awr_clip > 0.0) {
            return fail("AWR temperature must be non-negative and its clip positive");
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return fail("gamma must lie in [0, 1]");
        }
        if !(self.polyak >= 0.0 && self.polyak <= 1.0) {
            return fail("polyak must lie in [0, 1]");
        }
        if !(self.rho >= 0.0 && self.rho <= 1.0) {
            return fail("rho must lie in [0, 1]");
        }
        if self.utd < 1 || self.max_q_samples < 1 || self.calibration_samples < 1 {
            return fail("utd, max_q_samples and calibration_samples must be >= 1");
        }
        if self.hidden_dims.contains(&0) {
            return fail("hidden widths must be positive");
        }
        for lr in [self.actor_lr, self.critic_lr, self.value_lr] {
            if !(lr > 0.0) {
                return fail("learning rates must be positive");
            }
        }
        if !(self.initial_temperature > 0.0) || !(self.exploration_noise >= 0.0) {
            return fail("temperature must be positive and exploration noise non-negative");
        }
        Ok(())
    }

    fn expectiles(&self) -> Result<(Expectile, Expectile)> {
        Ok((Expectile::new(self.tau_expectile)?, Expectile::new(self.tau_online)?))
    }
}

/// Behavior sampler and energy net used to add a guided candidate to the
/// sampled maximum of online-like IQL targets.
#[derive(Clone, Copy)]
pub struct Guide<'a> {
    pub behavior: &'a BehaviorModel,
    pub energy: &'a EnergyNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub value_loss: Option<f64>,
    pub policy_loss: f64,
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone)]
struct Critic {
    q1: Mlp,
    q2: Mlp,
    q1_target: Mlp,
    q2_target: Mlp,
    opt1: Optimizer,
    opt2: Optimizer,
}

#[derive(Debug, Clone)]
enum Actor {
    Calql {
        policy: SquashedGaussian,
        opt: Optimizer,
        log_alpha: f64,
        alpha_opt: Optimizer,
    },
    Iql {
        policy: GaussianPolicy,
        net_opt: Optimizer,
        std_opt: Optimizer,
        value: Mlp,
        value_opt: Optimizer,
    },
}

#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    critic: Critic,
    actor: Actor,
    state_dim: usize,
    action_dim: usize,
}

fn orthogonal_init() -> Init {
    Init::Orthogonal { hidden_gain: core::f64::consts::SQRT_2, final_gain: 1.0 }
}

/// Membership of each batch index in the offline-like stratum.
pub fn offline_mask(strat: &StratifiedBatch) -> Vec<bool> {
    strat.strata().into_iter().map(|s| s == Stratum::OfflineLike).collect()
}

fn check_finite(what: &str, loss: f64, grad: &[f64]) -> Result<()> {
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(numerical(alloc::format!("{what} is not finite; update aborted")));
    }
    Ok(())
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, config: AgentConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let q_spec = MlpSpec::new(state_dim + action_dim, &config.hidden_dims, 1, Activation::Relu, FinalActivation::None)?;
        let q1 = Mlp::new(q_spec.clone(), orthogonal_init(), rng)?;
        let q2 = Mlp::new(q_spec, orthogonal_init(), rng)?;
        let critic_opt = OptimizerSpec::adam(config.critic_lr);
        let critic = Critic {
            opt1: Optimizer::new(critic_opt, q1.param_count())?,
            opt2: Optimizer::new(critic_opt, q2.param_count())?,
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
        };
        let actor_opt = OptimizerSpec::adam(config.actor_lr);
        let actor = match config.backbone {
            Backbone::Calql => {
                let policy = SquashedGaussian::new(state_dim, action_dim, &config.hidden_dims, rng)?;
                Actor::Calql {
                    opt: Optimizer::new(actor_opt, policy.net().param_count())?,
                    policy,
                    log_alpha: float::ln(config.initial_temperature),
                    alpha_opt: Optimizer::new(actor_opt, 1)?,
                }
            }
            Backbone::Iql => {
                let policy = GaussianPolicy::new(state_dim, action_dim, &config.hidden_dims, rng)?;
                let v_spec = MlpSpec::new(state_dim, &config.hidden_dims, 1, Activation::Relu, FinalActivation::None)?;
                let value = Mlp::new(v_spec, orthogonal_init(), rng)?;
                Actor::Iql {
                    net_opt: Optimizer::new(actor_opt, policy.net().param_count())?,
                    std_opt: Optimizer::new(actor_opt, action_dim)?,
                    policy,
                    value_opt: Optimizer::new(OptimizerSpec::adam(config.value_lr), value.param_count())?,
                    value,
                }
            }
        };
        Ok(Self { config, critic, actor, state_dim, action_dim })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    /// Swaps in a new configuration; the network shapes and learning rates must not change.
    pub fn reconfigure(&mut self, config: AgentConfig) -> Result<()> {
        config.validate()?;
        let c = &self.config;
        if config.backbone != c.backbone
            || config.hidden_dims != c.hidden_dims
            || config.actor_lr != c.actor_lr
            || config.critic_lr != c.critic_lr
            || config.value_lr != c.value_lr
        {
            return Err(Error::InvalidConfig(String::from(
                "backbone, hidden widths and learning rates are fixed once an agent exists",
            )));
        }
        self.config = config;
        Ok(())
    }

    pub fn backbone(&self) -> Backbone {
        self.config.backbone
    }

    pub fn q1(&self) -> &Mlp {
        &self.critic.q1
    }

    pub fn q2(&self) -> &Mlp {
        &self.critic.q2
    }

    pub fn q_targets(&self) -> (&Mlp, &Mlp) {
        (&self.critic.q1_target, &self.critic.q2_target)
    }

    pub fn value_net(&self) -> Option<&Mlp> {
        match &self.actor {
            Actor::Iql { value, .. } => Some(value),
            Actor::Calql { .. } => None,
        }
    }

    pub fn squashed_policy(&self) -> Option<&SquashedGaussian> {
        match &self.actor {
            Actor::Calql { policy, .. } => Some(policy),
            Actor::Iql { .. } => None,
        }
    }

    pub fn gaussian_policy(&self) -> Option<&GaussianPolicy> {
        match &self.actor {
            Actor::Iql { policy, .. } => Some(policy),
            Actor::Calql { .. } => None,
        }
    }

    /// Entropy temperature of the Cal-QL actor.
    pub fn temperature(&self) -> Option<f64> {
        match &self.actor {
            Actor::Calql { log_alpha, .. } => Some(float::exp(*log_alpha)),
            Actor::Iql { .. } => None,
        }
    }

    pub fn target_entropy(&self) -> f64 {
        -(self.action_dim as f64)
    }

    fn require(&self, backbone: Backbone) -> Result<()> {
        if self.config.backbone != backbone {
            return Err(Error::InvalidConfig(alloc::format!(
                "operation needs the {backbone:?} backbone, agent is {:?}",
                self.config.backbone
            )));
        }
        Ok(())
    }

    /// Deterministic action used for evaluation.
    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        match &self.actor {
            Actor::Calql { policy, .. } => policy.mode(state),
            Actor::Iql { policy, .. } => policy.mean(state),
        }
    }

    /// Exploratory action used while collecting online data.
    pub fn act_explore<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        match &self.actor {
            Actor::Calql { policy, .. } => Ok(policy.sample(state, rng)?.action),
            Actor::Iql { policy, .. } => policy.explore(state, self.config.exploration_noise, rng),
        }
    }

    /// A draw from the current policy.
    pub fn sample_action<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        match &self.actor {
            Actor::Calql { policy, .. } => Ok(policy.sample(state, rng)?.action),
            Actor::Iql { policy, .. } => policy.sample(state, rng),
        }
    }

    pub fn min_q(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(q_value(&self.critic.q1, state, action)?.min(q_value(&self.critic.q2, state, action)?))
    }

    pub fn min_q_target(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(q_value(&self.critic.q1_target, state, action)?.min(q_value(&self.critic.q2_target, state, action)?))
    }

    /// Largest target value among `samples` policy draws at `state`.
    fn sampled_max_target<R: Rng + ?Sized>(&self, state: &[f64], samples: usize, rng: &mut R) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for _ in 0..samples {
            let a = self.sample_action(state, rng)?;
            best = best.max(self.min_q_target(state, &a)?);
        }
        Ok(best)
    }

    /// Draws the TD targets and regularizer actions of a Cal-QL critic update,
    /// sample by sample in batch order.
    pub fn prepare_calql<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Result<CalqlInputs> {
        self.require(Backbone::Calql)?;
        let backups = if self.config.max_target_backup { self.config.max_q_samples } else { 1 };
        let mut targets = Vec::with_capacity(batch.len());
        let mut policy_actions = Vec::with_capacity(batch.len());
        for t in &batch.transitions {
            let next = self.sampled_max_target(&t.next_state, backups, rng)?;
            targets.push(if t.terminal { t.reward } else { t.reward + self.config.gamma * next });
            let acts = (0..self.config.calibration_samples)
                .map(|_| self.sample_action(&t.state, rng))
                .collect::<Result<Vec<_>>>()?;
            policy_actions.push(acts);
        }
        Ok(CalqlInputs { targets, policy_actions })
    }

    /// Calibrated conservative penalty of `min(Q1, Q2)` with policy samples at
    /// each state and `rtg` as the reference value.
    pub fn calql_regularizer<R: Rng + ?Sized>(
        &self,
        states: &[Vec<f64>],
        actions: &[Vec<f64>],
        rtg: &[f64],
        rng: &mut R,
    ) -> Result<f64> {
        check_dims("dataset actions", states.len(), actions.len())?;
        check_dims("return-to-go values", states.len(), rtg.len())?;
        let mut q_policy = Vec::with_capacity(states.len());
        let mut q_data = Vec::with_capacity(states.len());
        for (s, a) in states.iter().zip(actions) {
            let qs = (0..self.config.calibration_samples)
                .map(|_| {
                    let a_pi = self.sample_action(s, rng)?;
                    self.min_q(s, &a_pi)
                })
                .collect::<Result<Vec<_>>>()?;
            q_policy.push(qs);
            q_data.push(self.min_q(s, a)?);
        }
        let v_ref: Vec<Option<f64>> = rtg.iter().copied().map(Some).collect();
        calql_regularizer_values(&q_policy, &v_ref, &q_data)
    }

    /// Cal-QL critic loss summed over both Q-networks.
    pub fn calql_critic_loss(&self, batch: &Batch, inputs: &CalqlInputs) -> Result<f64> {
        self.require(Backbone::Calql)?;
        let a = self.config.alpha;
        Ok(calql_critic_base(&self.critic.q1, batch, inputs, a)?.0 + calql_critic_base(&self.critic.q2, batch, inputs, a)?.0)
    }

    /// Stratified Cal-QL critic loss: regularizer on the offline-like stratum only.
    pub fn calql_critic_loss_strat(&self, batch: &Batch, strat: &StratifiedBatch, inputs: &CalqlInputs) -> Result<f64> {
        self.require(Backbone::Calql)?;
        let mask = offline_mask(strat);
        let a = self.config.alpha;
        Ok(calql_critic_strat(&self.critic.q1, batch, inputs, &mask, a)?.0
            + calql_critic_strat(&self.critic.q2, batch, inputs, &mask, a)?.0)
    }

    /// `min(Q1_target, Q2_target)` at every batch pair.
    pub fn target_q_values(&self, batch: &Batch) -> Result<Vec<f64>> {
        batch.transitions.iter().map(|t| self.min_q_target(&t.state, &t.action)).collect()
    }

    fn value_of(&self, state: &[f64]) -> Result<f64> {
        match &self.actor {
            Actor::Iql { value, .. } => Ok(value.forward(state)?[0]),
            Actor::Calql { .. } => Err(invalid("Cal-QL has no value network")),
        }
    }

    fn value_net_checked(&self) -> Result<&Mlp> {
        self.require(Backbone::Iql)?;
        Ok(self.value_net().expect("IQL agent has a value network"))
    }

    pub fn iql_value_loss(&self, batch: &Batch) -> Result<f64> {
        let v = self.value_net_checked()?;
        let (tau, _) = self.config.expectiles()?;
        Ok(iql_value_base(v, batch, &self.target_q_values(batch)?, tau)?.0)
    }

    /// Expectile `tau_expectile` on the offline-like stratum and `tau_online` on the rest.
    pub fn iql_value_loss_strat(&self, batch: &Batch, strat: &StratifiedBatch) -> Result<f64> {
        let v = self.value_net_checked()?;
        let (tau, tau_on) = self.config.expectiles()?;
        Ok(iql_value_strat(v, batch, &self.target_q_values(batch)?, &offline_mask(strat), tau, tau_on)?.0)
    }

    /// Expectile on the offline-like stratum, signed residual on the rest.
    pub fn iql_value_loss_adv(&self, batch: &Batch, strat: &StratifiedBatch) -> Result<f64> {
        let v = self.value_net_checked()?;
        let (tau, _) = self.config.expectiles()?;
        Ok(iql_value_adv(v, batch, &self.target_q_values(batch)?, &offline_mask(strat), tau)?.0)
    }

    fn next_values(&self, batch: &Batch) -> Result<Vec<f64>> {
        batch.transitions.iter().map(|t| self.value_of(&t.next_state)).collect()
    }

    /// Sampled `max_a' min_j Q_target(s', a')` for every online-like index:
    /// `max_q_samples` policy draws plus one guided draw when `guide` is given.
    pub fn iql_sampled_maxima<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        in_off: &[bool],
        guide: Option<Guide<'_>>,
        rng: &mut R,
    ) -> Result<Vec<Option<f64>>> {
        self.require(Backbone::Iql)?;
        check_dims("stratum mask", batch.len(), in_off.len())?;
        batch
            .transitions
            .iter()
            .zip(in_off)
            .map(|(t, &off)| {
                if off {
                    return Ok(None);
                }
                let mut best = self.sampled_max_target(&t.next_state, self.config.max_q_samples, rng)?;
                if let Some(g) = guide {
                    let a = g.energy.sample_guided(g.behavior, &t.next_state, rng)?;
                    best = best.max(self.min_q_target(&t.next_state, &a)?);
                }
                Ok(Some(best))
            })
            .collect()
    }

    /// IQL Q loss summed over both Q-networks, bootstrapping from `V(s')`.
    pub fn iql_q_loss(&self, batch: &Batch) -> Result<f64> {
        self.value_net_checked()?;
        let targets = iql_targets_base(batch, &self.next_values(batch)?, self.config.gamma)?;
        Ok(q_regression(&self.critic.q1, batch, &targets)?.0 + q_regression(&self.critic.q2, batch, &targets)?.0)
    }

    /// Stratified IQL Q loss with maxima from [`Agent::iql_sampled_maxima`].
    pub fn iql_q_loss_strat(&self, batch: &Batch, strat: &StratifiedBatch, maxima: &[Option<f64>]) -> Result<f64> {
        self.value_net_checked()?;
        let targets =
            iql_targets_strat(batch, &self.next_values(batch)?, maxima, &offline_mask(strat), self.config.gamma)?;
        Ok(q_regression(&self.critic.q1, batch, &targets)?.0 + q_regression(&self.critic.q2, batch, &targets)?.0)
    }

    fn advantages(&self, batch: &Batch) -> Result<Vec<f64>> {
        let q = self.target_q_values(batch)?;
        batch.transitions.iter().zip(q).map(|(t, q)| Ok(q - self.value_of(&t.state)?)).collect()
    }

    pub fn awr_policy_loss(&self, batch: &Batch) -> Result<f64> {
        self.require(Backbone::Iql)?;
        let policy = self.gaussian_policy().expect("IQL agent has a Gaussian policy");
        Ok(awr_loss(policy, batch, &self.advantages(batch)?, self.config.beta_awr, self.config.awr_clip)?.0)
    }

    fn actor_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n).map(|_| rng::normal_vec(rng, self.action_dim)).collect()
    }

    /// Cal-QL actor loss at the current temperature; no update.
    pub fn sac_policy_loss<R: Rng + ?Sized>(&self, states: &[Vec<f64>], rng: &mut R) -> Result<f64> {
        self.require(Backbone::Calql)?;
        let policy = self.squashed_policy().expect("Cal-QL agent has a squashed policy");
        let noise = self.actor_noise(states.len(), rng);
        let temp = self.temperature().expect("Cal-QL agent has a temperature");
        Ok(sac_actor_loss(policy, &self.critic.q1, &self.critic.q2, states, &noise, temp)?.0)
    }

    /// `target <- (1 - polyak) target + polyak online` for both Q-networks.
    pub fn soft_update(&mut self, polyak: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&polyak) {
            return Err(invalid("polyak must lie in [0, 1]"));
        }
        self.critic.q1.blend_into(&mut self.critic.q1_target, polyak)?;
        self.critic.q2.blend_into(&mut self.critic.q2_target, polyak)
    }

    fn step_critic(&mut self, g1: &[f64], g2: &[f64]) -> Result<()> {
        let c = &mut self.critic;
        c.opt1.step(c.q1.params_mut(), g1)?;
        c.opt2.step(c.q2.params_mut(), g2)
    }

    fn calql_actor_step<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<(f64, f64)> {
        let states: Vec<Vec<f64>> = batch.transitions.iter().map(|t| t.state.clone()).collect();
        let noise = self.actor_noise(states.len(), rng);
        let target_entropy = self.target_entropy();
        let Actor::Calql { policy, opt, log_alpha, alpha_opt } = &mut self.actor else {
            return Err(invalid("Cal-QL actor expected"));
        };
        let temp = float::exp(*log_alpha);
        let (loss, grad, mean_lp) = sac_actor_loss(policy, &self.critic.q1, &self.critic.q2, &states, &noise, temp)?;
        check_finite("actor loss", loss, &grad)?;
        opt.step(policy.net_mut().params_mut(), &grad)?;
        let (_, g_alpha) = temperature_loss(*log_alpha, mean_lp, target_entropy);
        let mut la = [*log_alpha];
        alpha_opt.step(&mut la, &[g_alpha])?;
        *log_alpha = la[0];
        Ok((loss, float::exp(*log_alpha)))
    }

    fn calql_update<R: Rng + ?Sized>(&mut self, batch: &Batch, mask: Option<&[bool]>, rng: &mut R) -> Result<UpdateStats> {
        let inputs = self.prepare_calql(batch, rng)?;
        let a = self.config.alpha;
        let ((l1, g1), (l2, g2)) = match mask {
            None => (
                calql_critic_base(&self.critic.q1, batch, &inputs, a)?,
                calql_critic_base(&self.critic.q2, batch, &inputs, a)?,
            ),
            Some(m) => (
                calql_critic_strat(&self.critic.q1, batch, &inputs, m, a)?,
                calql_critic_strat(&self.critic.q2, batch, &inputs, m, a)?,
            ),
        };
        check_finite("critic loss", l1 + l2, &g1)?;
        check_finite("critic loss", l1 + l2, &g2)?;
        self.step_critic(&g1, &g2)?;
        let (policy_loss, temp) = self.calql_actor_step(batch, rng)?;
        self.soft_update(self.config.polyak)?;
        Ok(UpdateStats { critic_loss: l1 + l2, value_loss: None, policy_loss, temperature: Some(temp) })
    }

    fn iql_update<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch,
        strat: Option<(&[bool], Option<Guide<'_>>)>,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        let (tau, tau_on) = self.config.expectiles()?;
        let q_t = self.target_q_values(batch)?;
        let maxima = match strat {
            Some((mask, guide)) => Some(self.iql_sampled_maxima(batch, mask, guide, rng)?),
            None => None,
        };
        let use_expectile_online = self.config.use_expectile_online;
        let Actor::Iql { value, value_opt, .. } = &mut self.actor else {
            return Err(invalid("IQL actor expected"));
        };
        let (value_loss, g_v) = match strat {
            None => iql_value_base(value, batch, &q_t, tau)?,
            Some((mask, _)) if use_expectile_online => iql_value_strat(value, batch, &q_t, mask, tau, tau_on)?,
            Some((mask, _)) => iql_value_adv(value, batch, &q_t, mask, tau)?,
        };
        check_finite("value loss", value_loss, &g_v)?;
        value_opt.step(value.params_mut(), &g_v)?;

        let v_next = self.next_values(batch)?;
        let targets = match (strat, &maxima) {
            (Some((mask, _)), Some(mx)) => iql_targets_strat(batch, &v_next, mx, mask, self.config.gamma)?,
            _ => iql_targets_base(batch, &v_next, self.config.gamma)?,
        };
        let (l1, g1) = q_regression(&self.critic.q1, batch, &targets)?;
        let (l2, g2) = q_regression(&self.critic.q2, batch, &targets)?;
        check_finite("critic loss", l1 + l2, &g1)?;
        check_finite("critic loss", l1 + l2, &g2)?;
        self.step_critic(&g1, &g2)?;

        let adv = self.advantages(batch)?;
        let (beta, clip) = (self.config.beta_awr, self.config.awr_clip);
        let Actor::Iql { policy, net_opt, std_opt, .. } = &mut self.actor else {
            return Err(invalid("IQL actor expected"));
        };
        let (policy_loss, g_net, g_std) = awr_loss(policy, batch, &adv, beta, clip)?;
        check_finite("policy loss", policy_loss, &g_net)?;
        net_opt.step(policy.net_mut().params_mut(), &g_net)?;
        std_opt.step(policy.log_std_mut(), &g_std)?;
        self.soft_update(self.config.polyak)?;
        Ok(UpdateStats { critic_loss: l1 + l2, value_loss: Some(value_loss), policy_loss, temperature: None })
    }

    /// One gradient step of the unmodified backbone on `batch`.
    pub fn update_base<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<UpdateStats> {
        match self.config.backbone {
            Backbone::Calql => self.calql_update(batch, None, rng),
            Backbone::Iql => self.iql_update(batch, None, rng),
        }
    }

    /// One gradient step with stratum-specific losses.
    pub fn update_stratified<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch,
        strat: &StratifiedBatch,
        guide: Option<Guide<'_>>,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        check_dims("stratified batch", batch.len(), strat.len())?;
        let mask = offline_mask(strat);
        match self.config.backbone {
            Backbone::Calql => self.calql_update(batch, Some(&mask), rng),
            Backbone::Iql => self.iql_update(batch, Some((&mask, guide)), rng),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }
}

impl Checkpointable for Agent {
    fn save_tensors(&self, prefix: &str, out: &mut TensorMap) {
        let c = &self.critic;
        c.q1.save_tensors(&alloc::format!("{prefix}.q1"), out);
        c.q2.save_tensors(&alloc::format!("{prefix}.q2"), out);
        c.q1_target.save_tensors(&alloc::format!("{prefix}.q1_target"), out);
        c.q2_target.save_tensors(&alloc::format!("{prefix}.q2_target"), out);
        c.opt1.save_tensors(&alloc::format!("{prefix}.q1_opt"), out);
        c.opt2.save_tensors(&alloc::format!("{prefix}.q2_opt"), out);
        match &self.actor {
            Actor::Calql { policy, opt, log_alpha, alpha_opt } => {
                policy.save_tensors(&alloc::format!("{prefix}.policy"), out);
                opt.save_tensors(&alloc::format!("{prefix}.policy_opt"), out);
                out.insert(alloc::format!("{prefix}.log_alpha"), Tensor::scalar(*log_alpha));
                alpha_opt.save_tensors(&alloc::format!("{prefix}.alpha_opt"), out);
            }
            Actor::Iql { policy, net_opt, std_opt, value, value_opt } => {
                policy.save_tensors(&alloc::format!("{prefix}.policy"), out);
                net_opt.save_tensors(&alloc::format!("{prefix}.policy_opt"), out);
                std_opt.save_tensors(&alloc::format!("{prefix}.log_std_opt"), out);
                value.save_tensors(&alloc::format!("{prefix}.value"), out);
                value_opt.save_tensors(&alloc::format!("{prefix}.value_opt"), out);
            }
        }
    }

    fn load_tensors(&mut self, prefix: &str, map: &TensorMap) -> Result<()> {
        let c = &mut self.critic;
        c.q1.load_tensors(&alloc::format!("{prefix}.q1"), map)?;
        c.q2.load_tensors(&alloc::format!("{prefix}.q2"), map)?;
        c.q1_target.load_tensors(&alloc::format!("{prefix}.q1_target"), map)?;
        c.q2_target.load_tensors(&alloc::format!("{prefix}.q2_target"), map)?;
        c.opt1.load_tensors(&alloc::format!("{prefix}.q1_opt"), map)?;
        c.opt2.load_tensors(&alloc::format!("{prefix}.q2_opt"), map)?;
        match &mut self.actor {
            Actor::Calql { policy, opt, log_alpha, alpha_opt } => {
                policy.load_tensors(&alloc::format!("{prefix}.policy"), map)?;
                opt.load_tensors(&alloc::format!("{prefix}.policy_opt"), map)?;
                *log_alpha = Tensor::fetch(map, &alloc::format!("{prefix}.log_alpha"), &[])?.data[0];
                alpha_opt.load_tensors(&alloc::format!("{prefix}.alpha_opt"), map)?;
            }
            Actor::Iql { policy, net_opt, std_opt, value, value_opt } => {
                policy.load_tensors(&alloc::format!("{prefix}.policy"), map)?;
                net_opt.load_tensors(&alloc::format!("{prefix}.policy_opt"), map)?;
                std_opt.load_tensors(&alloc::format!("{prefix}.log_std_opt"), map)?;
                value.load_tensors(&alloc::format!("{prefix}.value"), map)?;
                value_opt.load_tensors(&alloc::format!("{prefix}.value_opt"), map)?;
            }
        }
        Ok(())
    }
}
