//! Point-mass control tasks, scripted behavior policies and offline dataset
//! generation with return-to-go labels.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, invalid, Result};
use crate::math::float;
use crate::rng;

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;
/// Positions are clipped to `[-STATE_BOUND, STATE_BOUND]^2`.
pub const STATE_BOUND: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    PointmassDense,
    PointmassSparse,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointmassDense => "pointmass-dense",
            EnvKind::PointmassSparse => "pointmass-sparse",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "pointmass-dense" => Some(EnvKind::PointmassDense),
            "pointmass-sparse" => Some(EnvKind::PointmassSparse),
            _ => None,
        }
    }

    pub fn is_sparse(self) -> bool {
        self == EnvKind::PointmassSparse
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub name: EnvKind,
    pub horizon: usize,
    pub goal: [f64; 2],
    pub step_size: f64,
    pub reward_scale: f64,
    pub reward_bias: f64,
    /// Half-width of the uniform start-position noise around the origin.
    pub reset_noise: f64,
    /// Distance below which the sparse task counts the goal as reached.
    pub goal_radius: f64,
}

impl EnvSpec {
    pub fn dense() -> Self {
        Self {
            name: EnvKind::PointmassDense,
            horizon: 50,
            goal: [1.0, 1.0],
            step_size: 0.1,
            reward_scale: 1.0,
            reward_bias: 0.0,
            reset_noise: 0.05,
            goal_radius: 0.1,
        }
    }

    pub fn sparse() -> Self {
        Self { name: EnvKind::PointmassSparse, reward_scale: 10.0, reward_bias: -5.0, ..Self::dense() }
    }

    pub fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::PointmassDense => Self::dense(),
            EnvKind::PointmassSparse => Self::sparse(),
        }
    }

    pub fn state_dim(&self) -> usize {
        STATE_DIM
    }

    pub fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        if !(self.step_size > 0.0) || !(self.reset_noise >= 0.0) || !(self.goal_radius > 0.0) {
            return Err(invalid("step size and goal radius must be positive, reset noise non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Offline,
    Online,
}

/// One environment step.
///
/// `done` marks the last transition of an episode (goal or horizon);
/// `terminal` marks goal absorption only and is what masks bootstrapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub terminal: bool,
    pub return_to_go: f64,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quality {
    Expert,
    Medium,
    Random,
}

impl Quality {
    pub fn name(self) -> &'static str {
        match self {
            Quality::Expert => "expert",
            Quality::Medium => "medium",
            Quality::Random => "random",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "expert" => Some(Quality::Expert),
            "medium" => Some(Quality::Medium),
            "random" => Some(Quality::Random),
            _ => None,
        }
    }
}

/// Knobs of the scripted controllers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedProfile {
    pub gain: f64,
    pub noise_std: f64,
    pub random_prob: f64,
}

impl Default for ScriptedProfile {
    fn default() -> Self {
        Self { gain: 5.0, noise_std: 0.3, random_prob: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: EnvSpec,
    pub quality: Quality,
    pub gamma: f64,
    pub transitions: Vec<Transition>,
    pub episode_starts: Vec<usize>,
}

/// Outcome of a single [`env_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Goal absorption (sparse task only). Horizon ends are tracked by the caller.
    pub terminal: bool,
}

fn clip(x: f64, bound: f64) -> f64 {
    x.clamp(-bound, bound)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    float::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

pub fn env_reset<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> Vec<f64> {
    (0..STATE_DIM)
        .map(|_| {
            let u = rng::uniform(rng, -1.0, 1.0);
            u * spec.reset_noise
        })
        .collect()
}

pub fn env_step(spec: &EnvSpec, state: &[f64], action: &[f64]) -> Result<StepOutcome> {
    check_dims("env state", STATE_DIM, state.len())?;
    check_dims("env action", ACTION_DIM, action.len())?;
    if state.iter().chain(action).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite state or action"));
    }
    let next_state: Vec<f64> = state
        .iter()
        .zip(action)
        .map(|(s, a)| clip(s + spec.step_size * clip(*a, 1.0), STATE_BOUND))
        .collect();
    let dist = distance(&next_state, &spec.goal);
    let (reward, terminal) = match spec.name {
        EnvKind::PointmassDense => (spec.reward_scale * -dist + spec.reward_bias, false),
        EnvKind::PointmassSparse => {
            let reached = dist < spec.goal_radius;
            (spec.reward_scale * if reached { 1.0 } else { 0.0 } + spec.reward_bias, reached)
        }
    };
    Ok(StepOutcome { next_state, reward, terminal })
}

/// Proportional controller towards the goal, clipped to the action box.
pub fn expert_action(spec: &EnvSpec, state: &[f64], gain: f64) -> Vec<f64> {
    state.iter().zip(&spec.goal).map(|(s, g)| clip(gain * (g - s), 1.0)).collect()
}

pub fn scripted_policy<R: Rng + ?Sized>(
    spec: &EnvSpec,
    state: &[f64],
    quality: Quality,
    profile: &ScriptedProfile,
    rng: &mut R,
) -> Vec<f64> {
    let random = |rng: &mut R| (0..ACTION_DIM).map(|_| rng::uniform(rng, -1.0, 1.0)).collect();
    match quality {
        Quality::Expert => expert_action(spec, state, profile.gain),
        Quality::Random => random(rng),
        Quality::Medium => {
            if profile.random_prob > 0.0 && rng.random::<f64>() < profile.random_prob {
                random(rng)
            } else {
                expert_action(spec, state, profile.gain)
                    .into_iter()
                    .map(|a| clip(a + profile.noise_std * rng::normal(rng), 1.0))
                    .collect()
            }
        }
    }
}

/// Rolls one episode with `policy`; `return_to_go` is left at zero.
pub fn rollout<R, P>(spec: &EnvSpec, origin: Origin, rng: &mut R, mut policy: P) -> Result<Vec<Transition>>
where
    R: Rng + ?Sized,
    P: FnMut(&[f64], &mut R) -> Result<Vec<f64>>,
{
    let mut state = env_reset(spec, rng);
    let mut episode = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        let action = policy(&state, rng)?;
        let out = env_step(spec, &state, &action)?;
        let done = out.terminal || t + 1 == spec.horizon;
        let clipped: Vec<f64> = action.iter().map(|a| clip(*a, 1.0)).collect();
        episode.push(Transition {
            state: core::mem::replace(&mut state, out.next_state.clone()),
            action: clipped,
            reward: out.reward,
            next_state: out.next_state,
            done,
            terminal: out.terminal,
            return_to_go: 0.0,
            origin,
        });
        if done {
            break;
        }
    }
    Ok(episode)
}

/// Sets `return_to_go_t = r_t + gamma * return_to_go_{t+1}` over one episode.
pub fn label_returns(episode: &mut [Transition], gamma: f64) {
    let mut acc = 0.0;
    for tr in episode.iter_mut().rev() {
        acc = tr.reward + gamma * acc;
        tr.return_to_go = acc;
    }
}

pub fn generate_dataset(
    spec: &EnvSpec,
    quality: Quality,
    n_transitions: usize,
    gamma: f64,
    seed: u64,
) -> Result<Dataset> {
    generate_dataset_with(spec, quality, &ScriptedProfile::default(), n_transitions, gamma, seed)
}

pub fn generate_dataset_with(
    spec: &EnvSpec,
    quality: Quality,
    profile: &ScriptedProfile,
    n_transitions: usize,
    gamma: f64,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if n_transitions < spec.horizon {
        return Err(invalid("dataset must hold at least one horizon of transitions"));
    }
    let mut rng = rng::substream(seed, rng::streams::DATA);
    let mut transitions = Vec::with_capacity(n_transitions + spec.horizon);
    let mut episode_starts = Vec::new();
    while transitions.len() < n_transitions {
        let mut episode = rollout(spec, Origin::Offline, &mut rng, |s, r| {
            Ok(scripted_policy(spec, s, quality, profile, r))
        })?;
        label_returns(&mut episode, gamma);
        episode_starts.push(transitions.len());
        transitions.extend(episode);
    }
    Ok(Dataset { env: spec.clone(), quality, gamma, transitions, episode_starts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use alloc::vec;

    fn tr(reward: f64, done: bool) -> Transition {
        Transition {
            state: vec![0.0; 2],
            action: vec![0.0; 2],
            reward,
            next_state: vec![0.0; 2],
            done,
            terminal: done,
            return_to_go: f64::NAN,
            origin: Origin::Offline,
        }
    }

    /// Independent recursive oracle for discounted sums.
    fn rtg_oracle(rewards: &[f64], gamma: f64) -> Vec<f64> {
        fn go(r: &[f64], gamma: f64) -> f64 {
            match r.split_first() {
                None => 0.0,
                Some((h, rest)) => h + gamma * go(rest, gamma),
            }
        }
        (0..rewards.len()).map(|i| go(&rewards[i..], gamma)).collect()
    }

    #[test]
    fn reset_is_seeded_and_bounded() {
        let spec = EnvSpec::dense();
        let a = env_reset(&spec, &mut substream(3, 0));
        let b = env_reset(&spec, &mut substream(3, 0));
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.abs() <= 0.05));
        let quiet = EnvSpec { reset_noise: 0.0, ..spec };
        assert_eq!(env_reset(&quiet, &mut substream(3, 0)), [0.0, 0.0]);
    }

    #[test]
    fn step_examples() {
        let spec = EnvSpec::dense();
        let out = env_step(&spec, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((out.next_state[0] - 0.1).abs() < 1e-15 && (out.next_state[1] - 0.1).abs() < 1e-15);
        let big = env_step(&spec, &[0.0, 0.0], &[5.0, 5.0]).unwrap();
        assert_eq!(big.next_state, out.next_state);
        let at_goal = env_step(&spec, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(at_goal.reward, 0.0);
        assert!(env_step(&spec, &[f64::NAN, 0.0], &[0.0, 0.0]).is_err());
        assert!(env_step(&spec, &[0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn sparse_reward_and_termination() {
        let spec = EnvSpec::sparse();
        let miss = env_step(&spec, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!((miss.reward, miss.terminal), (-5.0, false));
        let hit = env_step(&spec, &[0.95, 0.95], &[0.5, 0.5]).unwrap();
        assert_eq!((hit.reward, hit.terminal), (5.0, true));
    }

    #[test]
    fn state_is_clipped_to_box() {
        let out = env_step(&EnvSpec::dense(), &[1.45, -1.45], &[1.0, -1.0]).unwrap();
        assert_eq!(out.next_state, [1.5, -1.5]);
    }

    #[test]
    fn scripted_examples() {
        let spec = EnvSpec::dense();
        let p = ScriptedProfile::default();
        let mut rng = substream(1, 1);
        assert_eq!(scripted_policy(&spec, &[1.0, 1.0], Quality::Expert, &p, &mut rng), [0.0, 0.0]);
        assert_eq!(scripted_policy(&spec, &[-1.0, -1.0], Quality::Expert, &p, &mut rng), [1.0, 1.0]);
        let quiet = ScriptedProfile { noise_std: 0.0, random_prob: 0.0, ..p };
        let s = [0.9, 0.7];
        assert_eq!(
            scripted_policy(&spec, &s, Quality::Medium, &quiet, &mut rng),
            scripted_policy(&spec, &s, Quality::Expert, &quiet, &mut rng)
        );
        for _ in 0..50 {
            let a = scripted_policy(&spec, &s, Quality::Random, &p, &mut rng);
            assert!(a.iter().all(|x| x.abs() <= 1.0));
        }
    }

    #[test]
    fn return_labels_match_oracle() {
        let mut ep = vec![tr(1.0, false), tr(1.0, false), tr(1.0, true)];
        label_returns(&mut ep, 0.9);
        let expect = rtg_oracle(&[1.0, 1.0, 1.0], 0.9);
        assert!((expect[0] - 2.71).abs() < 1e-12 && (expect[1] - 1.9).abs() < 1e-12);
        for (t, e) in ep.iter().zip(&expect) {
            assert!((t.return_to_go - e).abs() < 1e-12);
        }
        let mut zeros = vec![tr(0.0, false), tr(0.0, true)];
        label_returns(&mut zeros, 0.99);
        assert!(zeros.iter().all(|t| t.return_to_go == 0.0));
        let mut single = vec![tr(-3.5, true)];
        label_returns(&mut single, 0.99);
        assert_eq!(single[0].return_to_go, -3.5);
    }

    #[test]
    fn dataset_invariants() {
        for spec in [EnvSpec::dense(), EnvSpec::sparse()] {
            let data = generate_dataset(&spec, Quality::Medium, 600, 0.99, 7).unwrap();
            assert!(data.transitions.len() >= 600);
            assert_eq!(data.episode_starts[0], 0);
            for (k, &start) in data.episode_starts.iter().enumerate() {
                let end = data.episode_starts.get(k + 1).copied().unwrap_or(data.transitions.len());
                let ep = &data.transitions[start..end];
                assert!(ep.last().unwrap().done);
                assert!(ep[..ep.len() - 1].iter().all(|t| !t.done));
                for w in ep.windows(2) {
                    assert_eq!(w[0].next_state, w[1].state);
                    assert_eq!(w[0].return_to_go, w[0].reward + 0.99 * w[1].return_to_go);
                }
                assert_eq!(ep.last().unwrap().return_to_go, ep.last().unwrap().reward);
            }
        }
        assert!(generate_dataset(&EnvSpec::dense(), Quality::Medium, 10, 0.99, 0).is_err());
    }

    #[test]
    fn expert_beats_medium() {
        let spec = EnvSpec::dense();
        let p = ScriptedProfile::default();
        let mean = |q: Quality| {
            let mut rng = substream(42, 9);
            let mut total = 0.0;
            for _ in 0..100 {
                let ep = rollout(&spec, Origin::Offline, &mut rng, |s, r| Ok(scripted_policy(&spec, s, q, &p, r))).unwrap();
                total += ep.iter().map(|t| t.reward).sum::<f64>();
            }
            total / 100.0
        };
        assert!(mean(Quality::Expert) >= mean(Quality::Medium));
    }
}
