//! Offline pretraining, online fine-tuning with stratified updates, and evaluation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentConfig, Backbone, Guide, UpdateStats};
use crate::diffusion::{BehaviorModel, DiffusionConfig};
use crate::energy::{EnergyConfig, EnergyNet};
use crate::envs::{
    env_reset, env_step, scripted_policy, Dataset, EnvKind, EnvSpec, Origin, Quality, ScriptedProfile, Transition,
    ACTION_DIM, STATE_DIM,
};
use crate::error::{check_dims, invalid, Error, Result};
use crate::math::mean_std;
use crate::nn::{Checkpointable, Tensor, TensorMap};
use crate::replay::{sample_mixed, Batch, Provenance, ReplayBuffer};
use crate::rng::{streams, substream, ChaCha8Rng};
use crate::stratify::{alignment_scores, constrain_exchange, stratify_count};

/// Version of the [`MetricsRecord`] layout.
pub const METRICS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSpec,
    /// Dataset file consumed by the offline phase.
    pub dataset: String,
    pub output_dir: String,
    pub agent: AgentConfig,
    pub diffusion: DiffusionConfig,
    pub energy: EnergyConfig,
    pub offline_steps: usize,
    pub online_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    /// Width of the Gaussian in the alignment score.
    pub sigma_kl: f64,
    /// Generated actions per state when scoring (score = mean distance).
    pub score_samples: usize,
    /// Score with the energy net from before this iteration's update.
    pub score_before_energy_update: bool,
    pub online_capacity: usize,
    /// Episodes used to measure the random and expert reference returns.
    pub reference_episodes: usize,
}

impl RunConfig {
    pub fn new(kind: EnvKind, backbone: Backbone) -> Self {
        Self {
            env: EnvSpec::for_kind(kind),
            dataset: String::from("dataset.sdd"),
            output_dir: String::from("run"),
            agent: AgentConfig::for_env(backbone, kind),
            diffusion: DiffusionConfig::default(),
            energy: EnergyConfig::default(),
            offline_steps: 20_000,
            online_steps: 10_000,
            batch_size: 256,
            eval_every: 1_000,
            eval_episodes: 10,
            seed: 0,
            sigma_kl: 1.0,
            score_samples: 1,
            score_before_energy_update: false,
            online_capacity: 1_000_000,
            reference_episodes: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        let fail = |m: &str| Err(Error::InvalidConfig(String::from(m)));
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 || self.reference_episodes == 0 {
            return fail("eval_every, eval_episodes and reference_episodes must be positive");
        }
        if !(self.sigma_kl > 0.0) || self.score_samples == 0 {
            return fail("sigma_kl must be positive and score_samples at least 1");
        }
        if self.online_capacity == 0 || self.diffusion.timesteps == 0 {
            return fail("online_capacity and diffusion.timesteps must be positive");
        }
        if self.diffusion.batch_size == 0 || self.energy.batch_size == 0 {
            return fail("diffusion and energy batch sizes must be positive");
        }
        if self.energy.support_size < 2 {
            return fail("energy.support_size must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Offline,
    Online,
}

/// One line of the metrics log, written at every evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub schema: u32,
    pub step: usize,
    pub phase: Phase,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub normalized_score: f64,
    /// Mean losses over the updates since the previous record.
    pub critic_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub diffusion_loss: Option<f64>,
    pub energy_loss: Option<f64>,
    pub temperature: Option<f64>,
    /// Exchange count of the last batch, the interval maximum and the running mean.
    pub exchange_count: Option<usize>,
    pub exchange_count_max: Option<usize>,
    pub exchange_count_mean: Option<f64>,
}

/// Per-coordinate affine state normalisation, fitted once on the offline data.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit<'a, I: IntoIterator<Item = &'a [f64]>>(states: I, dim: usize) -> Result<Self> {
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); dim];
        for s in states {
            check_dims("normalizer state", dim, s.len())?;
            for (c, v) in columns.iter_mut().zip(s) {
                c.push(*v);
            }
        }
        if columns.first().is_none_or(|c| c.is_empty()) {
            return Err(invalid("cannot fit a normalizer without states"));
        }
        let (mean, std) = columns.iter().map(|c| mean_std(c)).map(|(m, s)| (m, s.max(1e-3))).unzip();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, state: &[f64]) -> Vec<f64> {
        state.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }

    fn apply_transition(&self, t: &mut Transition) {
        t.state = self.apply(&t.state);
        t.next_state = self.apply(&t.next_state);
    }

    pub fn apply_batch(&self, batch: &mut Batch) {
        batch.transitions.iter_mut().for_each(|t| self.apply_transition(t));
    }
}

impl Checkpointable for Normalizer {
    fn save_tensors(&self, prefix: &str, out: &mut TensorMap) {
        out.insert(alloc::format!("{prefix}.mean"), Tensor::vector(self.mean.clone()));
        out.insert(alloc::format!("{prefix}.std"), Tensor::vector(self.std.clone()));
    }

    fn load_tensors(&mut self, prefix: &str, map: &TensorMap) -> Result<()> {
        let n = self.mean.len();
        self.mean = Tensor::fetch(map, &alloc::format!("{prefix}.mean"), &[n])?.data.clone();
        self.std = Tensor::fetch(map, &alloc::format!("{prefix}.std"), &[n])?.data.clone();
        Ok(())
    }
}

/// Mean and standard deviation of undiscounted episode returns. Episode `e`
/// starts from a reset drawn with its own seed derived from `seed` and `e`.
pub fn evaluate<P>(env: &EnvSpec, episodes: usize, seed: u64, mut policy: P) -> Result<(f64, f64)>
where
    P: FnMut(&[f64], &mut ChaCha8Rng) -> Result<Vec<f64>>,
{
    if episodes == 0 {
        return Err(invalid("evaluation needs at least one episode"));
    }
    let mut returns = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut rng = substream(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(e as u64), streams::EVAL);
        let mut state = env_reset(env, &mut rng);
        let mut total = 0.0;
        for _ in 0..env.horizon {
            let a = policy(&state, &mut rng)?;
            let out = env_step(env, &state, &a)?;
            total += out.reward;
            state = out.next_state;
            if out.terminal {
                break;
            }
        }
        returns.push(total);
    }
    Ok(mean_std(&returns))
}

/// Returns of the scripted random and expert policies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct References {
    pub random: f64,
    pub expert: f64,
}

impl References {
    pub fn measure(env: &EnvSpec, episodes: usize, seed: u64) -> Result<Self> {
        let profile = ScriptedProfile::default();
        let draw = |q: Quality| {
            let mut rng = substream(seed, streams::REFS);
            evaluate(env, episodes, seed, |s, _| Ok(scripted_policy(env, s, q, &profile, &mut rng))).map(|r| r.0)
        };
        let random = draw(Quality::Random)?;
        let expert = draw(Quality::Expert)?;
        if !(expert > random) {
            return Err(invalid("expert reference does not beat the random one"));
        }
        Ok(Self { random, expert })
    }

    /// `100 (return - random) / (expert - random)`.
    pub fn normalize(&self, ret: f64) -> f64 {
        100.0 * (ret - self.random) / (self.expert - self.random)
    }
}

/// Lazily generated unguided behavior samples per buffer slot.
#[derive(Debug, Clone)]
pub struct SupportBank {
    k: usize,
    action_dim: usize,
    entries: BTreeMap<(Origin, usize), Vec<f64>>,
    rng: ChaCha8Rng,
}

impl SupportBank {
    pub fn new(k: usize, action_dim: usize, seed: u64) -> Self {
        Self { k, action_dim, entries: BTreeMap::new(), rng: substream(seed, streams::SUPPORT) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn invalidate(&mut self, origin: Origin, slot: usize) {
        self.entries.remove(&(origin, slot));
    }

    /// The `K` support actions of a slot, drawn from `behavior` at `state` on first use.
    pub fn get(&mut self, p: Provenance, state: &[f64], behavior: &BehaviorModel) -> Result<Vec<Vec<f64>>> {
        let key = (p.origin, p.slot);
        if !self.entries.contains_key(&key) {
            let mut flat = Vec::with_capacity(self.k * self.action_dim);
            for _ in 0..self.k {
                flat.extend(behavior.sample_unguided(state, &mut self.rng)?);
            }
            self.entries.insert(key, flat);
        }
        Ok(self.entries[&key].chunks(self.action_dim).map(<[f64]>::to_vec).collect())
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }

    fn take(&mut self) -> Option<f64> {
        let out = (self.n > 0).then(|| self.sum / self.n as f64);
        *self = Self::default();
        out
    }
}

#[derive(Debug, Default, Clone)]
struct Interval {
    critic: Mean,
    value: Mean,
    policy: Mean,
    energy: Mean,
    temperature: Option<f64>,
    exchange_last: Option<usize>,
    exchange_max: Option<usize>,
}

impl Interval {
    fn push(&mut self, s: &UpdateStats) {
        self.critic.push(s.critic_loss);
        self.policy.push(s.policy_loss);
        if let Some(v) = s.value_loss {
            self.value.push(v);
        }
        if s.temperature.is_some() {
            self.temperature = s.temperature;
        }
    }
}

/// Checkpoint contents of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    /// Agent parameters and the state normaliser.
    pub agent: TensorMap,
    pub diffusion: TensorMap,
    pub energy: TensorMap,
}

/// Everything a run owns: networks, buffers, references and logs.
#[derive(Debug, Clone)]
pub struct Lab {
    config: RunConfig,
    normalizer: Normalizer,
    agent: Agent,
    behavior: BehaviorModel,
    energy: EnergyNet,
    offline: ReplayBuffer,
    online: ReplayBuffer,
    bank: SupportBank,
    refs: References,
    exchange_log: Vec<usize>,
    exchange_total: usize,
    interval: Interval,
}

impl Lab {
    /// Fresh networks for `config`, with the offline buffer filled from `dataset`.
    pub fn new(config: RunConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.env.name != config.env.name {
            return Err(invalid(alloc::format!(
                "dataset was generated on {}, run targets {}",
                dataset.env.name.name(),
                config.env.name.name()
            )));
        }
        let first = dataset.transitions.first().ok_or_else(|| invalid("dataset is empty"))?;
        check_dims("dataset state", STATE_DIM, first.state.len())?;
        check_dims("dataset action", ACTION_DIM, first.action.len())?;
        let normalizer = Normalizer::fit(dataset.transitions.iter().map(|t| t.state.as_slice()), STATE_DIM)?;
        let mut init = substream(config.seed, streams::INIT);
        let agent = Agent::new(STATE_DIM, ACTION_DIM, config.agent.clone(), &mut init)?;
        let behavior = BehaviorModel::new(STATE_DIM, ACTION_DIM, &config.diffusion, &mut init)?;
        let energy = EnergyNet::new(STATE_DIM, ACTION_DIM, &config.energy, &mut init)?;
        let offline = ReplayBuffer::from_dataset(dataset)?;
        let online = ReplayBuffer::new(config.online_capacity, Origin::Online)?;
        let bank = SupportBank::new(config.energy.support_size, ACTION_DIM, config.seed);
        let refs = References::measure(&config.env, config.reference_episodes, config.seed)?;
        Ok(Self {
            config,
            normalizer,
            agent,
            behavior,
            energy,
            offline,
            online,
            bank,
            refs,
            exchange_log: Vec::new(),
            exchange_total: 0,
            interval: Interval::default(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn behavior(&self) -> &BehaviorModel {
        &self.behavior
    }

    pub fn energy(&self) -> &EnergyNet {
        &self.energy
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn references(&self) -> References {
        self.refs
    }

    pub fn online_buffer(&self) -> &ReplayBuffer {
        &self.online
    }

    /// Exchange count of every stratified online batch so far.
    pub fn exchange_log(&self) -> &[usize] {
        &self.exchange_log
    }

    /// Replaces the run configuration while keeping the trained networks.
    /// Only settings that leave network shapes untouched may change.
    pub fn set_config(&mut self, config: RunConfig) -> Result<()> {
        config.validate()?;
        let c = &self.config;
        let same_nets = config.env == c.env
            && config.diffusion.hidden_dims == c.diffusion.hidden_dims
            && config.diffusion.activation == c.diffusion.activation
            && config.diffusion.timesteps == c.diffusion.timesteps
            && config.energy.hidden_dims == c.energy.hidden_dims
            && config.energy.activation == c.energy.activation
            && config.energy.optimizer == c.energy.optimizer
            && config.energy.support_size == c.energy.support_size;
        if !same_nets {
            return Err(Error::InvalidConfig(String::from(
                "environment and behavior/energy network settings are fixed once a run exists",
            )));
        }
        self.agent.reconfigure(config.agent.clone())?;
        self.energy.set_beta(config.energy.beta);
        self.energy.set_guidance_scale(config.energy.guidance_scale);
        self.config = config;
        Ok(())
    }

    pub fn bundle(&self) -> Bundle {
        let mut agent = TensorMap::new();
        self.agent.save_tensors("agent", &mut agent);
        self.normalizer.save_tensors("normalizer", &mut agent);
        let mut diffusion = TensorMap::new();
        self.behavior.save_tensors("behavior", &mut diffusion);
        let mut energy = TensorMap::new();
        self.energy.save_tensors("energy", &mut energy);
        Bundle { agent, diffusion, energy }
    }

    pub fn load_agent(&mut self, map: &TensorMap) -> Result<()> {
        self.agent.load_tensors("agent", map)?;
        self.normalizer.load_tensors("normalizer", map)
    }

    pub fn load_behavior(&mut self, map: &TensorMap) -> Result<()> {
        self.bank.clear();
        self.behavior.load_tensors("behavior", map)
    }

    pub fn load_energy(&mut self, map: &TensorMap) -> Result<()> {
        self.energy.load_tensors("energy", map)
    }

    pub fn load_bundle(&mut self, bundle: &Bundle) -> Result<()> {
        self.load_agent(&bundle.agent)?;
        self.load_behavior(&bundle.diffusion)?;
        self.load_energy(&bundle.energy)
    }

    /// Deterministic policy return on the configured evaluation episodes.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        evaluate(&self.config.env, self.config.eval_episodes, self.config.seed, |s, _| {
            self.agent.act(&self.normalizer.apply(s))
        })
    }

    fn record(&mut self, step: usize, phase: Phase) -> Result<MetricsRecord> {
        let (mean, std) = self.evaluate()?;
        let iv = &mut self.interval;
        let rec = MetricsRecord {
            schema: METRICS_SCHEMA,
            step,
            phase,
            eval_return_mean: mean,
            eval_return_std: std,
            normalized_score: self.refs.normalize(mean),
            critic_loss: iv.critic.take(),
            value_loss: iv.value.take(),
            policy_loss: iv.policy.take(),
            diffusion_loss: None,
            energy_loss: iv.energy.take(),
            temperature: iv.temperature.take(),
            exchange_count: iv.exchange_last.take(),
            exchange_count_max: iv.exchange_max.take(),
            exchange_count_mean: (!self.exchange_log.is_empty())
                .then(|| self.exchange_total as f64 / self.exchange_log.len() as f64),
        };
        Ok(rec)
    }

    fn offline_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        let empty = ReplayBuffer::new(1, Origin::Online)?;
        let mut batch = sample_mixed(&self.offline, &empty, n, 1.0, rng)?;
        self.normalizer.apply_batch(&mut batch);
        Ok(batch)
    }

    /// Base-loss training of the agent on offline batches, evaluated every
    /// `eval_every` steps. Records go to `sink`.
    pub fn pretrain_agent<S: FnMut(&MetricsRecord) -> Result<()>>(&mut self, sink: &mut S) -> Result<()> {
        let mut rng = substream(self.config.seed, streams::TRAIN);
        sink(&self.record(0, Phase::Offline)?)?;
        for step in 1..=self.config.offline_steps {
            let batch = self.offline_batch(self.config.batch_size, &mut rng)?;
            let stats = self.agent.update_base(&batch, &mut rng)?;
            self.interval.push(&stats);
            if step % self.config.eval_every == 0 || step == self.config.offline_steps {
                sink(&self.record(step, Phase::Offline)?)?;
            }
        }
        Ok(())
    }

    /// Noise-prediction training of the behavior model; returns the mean loss.
    pub fn pretrain_behavior(&mut self) -> Result<Option<f64>> {
        let mut rng = substream(self.config.seed, streams::DIFFUSION);
        self.bank.clear();
        let mut mean = Mean::default();
        for _ in 0..self.config.diffusion.train_steps {
            let batch = self.offline_batch(self.config.diffusion.batch_size, &mut rng)?;
            mean.push(self.behavior.train_step(&batch, &mut rng)?);
        }
        Ok(mean.take())
    }

    /// One contrastive step on the states of `batch[..energy.batch_size]`,
    /// labelled with the agent's `min(Q1, Q2)`.
    fn energy_step<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<f64> {
        let m = self.config.energy.batch_size.min(batch.len());
        let mut states = Vec::with_capacity(m);
        let mut supports = Vec::with_capacity(m);
        let mut labels = Vec::with_capacity(m);
        for (t, p) in batch.transitions.iter().zip(&batch.provenance).take(m) {
            let sup = self.bank.get(*p, &t.state, &self.behavior)?;
            labels.push(sup.iter().map(|a| self.agent.min_q(&t.state, a)).collect::<Result<Vec<f64>>>()?);
            supports.push(sup);
            states.push(t.state.clone());
        }
        self.energy.train_on_supports(&states, &supports, &labels, self.behavior.schedule(), rng)
    }

    /// Contrastive training of the energy net on offline states; returns the mean loss.
    pub fn pretrain_energy(&mut self) -> Result<Option<f64>> {
        let mut rng = substream(self.config.seed, streams::ENERGY);
        let mut mean = Mean::default();
        for _ in 0..self.config.energy.train_steps {
            let batch = self.offline_batch(self.config.energy.batch_size, &mut rng)?;
            mean.push(self.energy_step(&batch, &mut rng)?);
        }
        Ok(mean.take())
    }

    /// Agent, then behavior model, then energy net. The final record carries
    /// the mean behavior and energy losses. With `offline_steps = 0` nothing is
    /// trained and only the initial evaluation is recorded.
    pub fn offline_pretrain<S: FnMut(&MetricsRecord) -> Result<()>>(&mut self, sink: &mut S) -> Result<()> {
        if self.config.offline_steps == 0 {
            return sink(&self.record(0, Phase::Offline)?);
        }
        let mut last: Option<MetricsRecord> = None;
        self.pretrain_agent(&mut |r: &MetricsRecord| match last.replace(r.clone()) {
            Some(prev) => sink(&prev),
            None => Ok(()),
        })?;
        let diffusion = self.pretrain_behavior()?;
        let energy = self.pretrain_energy()?;
        let mut rec = last.ok_or_else(|| invalid("offline phase produced no record"))?;
        rec.diffusion_loss = diffusion;
        rec.energy_loss = energy;
        sink(&rec)
    }

    /// The energy net takes a step only when `train_energy` is set (the first
    /// update after each environment step).
    fn score_and_stratify<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch,
        train_energy: bool,
        rng: &mut R,
    ) -> Result<crate::stratify::StratifiedBatch> {
        let guided = self.config.agent.use_energy_guidance;
        let train_energy = guided && train_energy;
        if train_energy && !self.config.score_before_energy_update {
            let l = self.energy_step(batch, rng)?;
            self.interval.energy.push(l);
        }
        let (behavior, energy) = (&self.behavior, &self.energy);
        let scores = alignment_scores(
            batch,
            |s: &[f64], r: &mut R| {
                if guided {
                    energy.sample_guided(behavior, s, r)
                } else {
                    behavior.sample_unguided(s, r)
                }
            },
            self.config.sigma_kl,
            self.config.score_samples,
            rng,
        )?;
        if train_energy && self.config.score_before_energy_update {
            let l = self.energy_step(batch, rng)?;
            self.interval.energy.push(l);
        }
        let strat = stratify_count(batch, &scores, batch.offline_count())?;
        let strat = constrain_exchange(&strat, self.config.agent.n_c);
        self.exchange_log.push(strat.exchange_count);
        self.exchange_total += strat.exchange_count;
        let iv = &mut self.interval;
        iv.exchange_last = Some(strat.exchange_count);
        iv.exchange_max = Some(iv.exchange_max.map_or(strat.exchange_count, |m| m.max(strat.exchange_count)));
        Ok(strat)
    }

    fn online_update<R: Rng + ?Sized>(&mut self, train_energy: bool, rng: &mut R) -> Result<UpdateStats> {
        let c = &self.config;
        let mut batch = sample_mixed(&self.offline, &self.online, c.batch_size, c.agent.rho, rng)?;
        self.normalizer.apply_batch(&mut batch);
        if !c.agent.use_stratification {
            return self.agent.update_base(&batch, rng);
        }
        let strat = self.score_and_stratify(&batch, train_energy, rng)?;
        let guide = self
            .config
            .agent
            .use_energy_guidance
            .then_some(Guide { behavior: &self.behavior, energy: &self.energy });
        self.agent.update_stratified(&batch, &strat, guide, rng)
    }

    /// Online fine-tuning: one environment step then `utd` updates per
    /// iteration, with an evaluation at step 0 and every `eval_every` steps.
    /// The energy net is trained once per environment step.
    pub fn finetune<S: FnMut(&MetricsRecord) -> Result<()>>(&mut self, sink: &mut S) -> Result<()> {
        let mut env_rng = substream(self.config.seed, streams::ENV);
        let mut rng = substream(self.config.seed, streams::ONLINE);
        self.interval = Interval::default();
        sink(&self.record(0, Phase::Online)?)?;
        let env = self.config.env.clone();
        let mut state = env_reset(&env, &mut env_rng);
        let mut t_in_episode = 0;
        for step in 1..=self.config.online_steps {
            let action = self.agent.act_explore(&self.normalizer.apply(&state), &mut rng)?;
            let action: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
            let out = env_step(&env, &state, &action)?;
            t_in_episode += 1;
            let done = out.terminal || t_in_episode == env.horizon;
            let next = out.next_state.clone();
            let slot = self.online.insert(Transition {
                state: core::mem::take(&mut state),
                action,
                reward: out.reward,
                next_state: out.next_state,
                done,
                terminal: out.terminal,
                return_to_go: 0.0,
                origin: Origin::Online,
            })?;
            self.bank.invalidate(Origin::Online, slot);
            state = if done {
                t_in_episode = 0;
                env_reset(&env, &mut env_rng)
            } else {
                next
            };
            for k in 0..self.config.agent.utd {
                let stats = self.online_update(k == 0, &mut rng)?;
                self.interval.push(&stats);
            }
            if step % self.config.eval_every == 0 || step == self.config.online_steps {
                sink(&self.record(step, Phase::Online)?)?;
            }
        }
        Ok(())
    }
}
