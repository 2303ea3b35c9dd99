//! Loss kernels. Each takes the network being differentiated plus inputs that
//! were prepared (and detached) beforehand, and returns the loss with its
//! parameter gradient. Stratified variants take a per-index mask `in_off`
//! marking membership of the offline-like stratum.

use alloc::vec;
use alloc::vec::Vec;

use crate::envs::Origin;
use crate::error::{check_dims, invalid, Result};
use crate::math::{expectile_loss, expectile_loss_grad, float, Expectile};
use crate::nn::Mlp;
use crate::replay::Batch;

use super::policy::{GaussianPolicy, SquashedGaussian};

pub fn state_action(state: &[f64], action: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(state.len() + action.len());
    x.extend_from_slice(state);
    x.extend_from_slice(action);
    x
}

pub fn q_value(q: &Mlp, state: &[f64], action: &[f64]) -> Result<f64> {
    Ok(q.forward(&state_action(state, action))?[0])
}

fn nonempty(batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    Ok(batch.len() as f64)
}

fn check_mask(batch: &Batch, in_off: &[bool]) -> Result<()> {
    check_dims("stratum mask", batch.len(), in_off.len())
}

/// Detached inputs of the Cal-QL critic loss, in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct CalqlInputs {
    /// TD targets `r + gamma (1 - terminal) Q_target(s', a')`.
    pub targets: Vec<f64>,
    /// Policy actions at each state for the regularizer.
    pub policy_actions: Vec<Vec<Vec<f64>>>,
}

/// Calibration reference of a sample: its return-to-go if it came from the
/// offline dataset, none otherwise.
pub fn reference_value(batch: &Batch, i: usize) -> Option<f64> {
    let t = &batch.transitions[i];
    (t.origin == Origin::Offline).then_some(t.return_to_go)
}

/// `mean_i [ mean_k c_i(Q(s_i, a_ik)) - Q(s_i, a_i) ]` with `c_i(x) = max(x, V_i)`
/// where a reference `V_i` exists and the identity otherwise.
pub fn calql_regularizer_values(q_policy: &[Vec<f64>], v_ref: &[Option<f64>], q_data: &[f64]) -> Result<f64> {
    check_dims("reference values", q_policy.len(), v_ref.len())?;
    check_dims("dataset q-values", q_policy.len(), q_data.len())?;
    if q_policy.is_empty() {
        return Err(invalid("regularizer needs at least one state"));
    }
    let mut total = 0.0;
    for ((qs, v), qd) in q_policy.iter().zip(v_ref).zip(q_data) {
        if qs.is_empty() {
            return Err(invalid("regularizer needs at least one policy action per state"));
        }
        let calibrated: f64 = qs.iter().map(|&q| v.map_or(q, |v| q.max(v))).sum::<f64>() / qs.len() as f64;
        total += calibrated - qd;
    }
    Ok(total / q_policy.len() as f64)
}

fn calql_check(batch: &Batch, inputs: &CalqlInputs) -> Result<f64> {
    let n = nonempty(batch)?;
    check_dims("td targets", batch.len(), inputs.targets.len())?;
    check_dims("policy actions", batch.len(), inputs.policy_actions.len())?;
    Ok(n)
}

/// Loss and gradient of `(1/N) sum_i 1/2 delta_i^2 + alpha (1/N) sum_{i in_off} [...]`.
fn calql_kernel(q: &Mlp, batch: &Batch, inputs: &CalqlInputs, in_off: &[bool], alpha: f64) -> Result<(f64, Vec<f64>)> {
    let n = calql_check(batch, inputs)?;
    let mut grad = vec![0.0; q.param_count()];
    let mut td = 0.0;
    let mut reg_total = 0.0;
    for (i, t) in batch.transitions.iter().enumerate() {
        let tape = q.forward_tape(&state_action(&t.state, &t.action))?;
        let qd = tape.output()[0];
        let delta = qd - inputs.targets[i];
        td += 0.5 * delta * delta;
        let reg = if in_off[i] { alpha } else { 0.0 };
        q.backward(&tape, &[(delta - reg) / n], &mut grad)?;
        if reg == 0.0 {
            continue;
        }
        let acts = &inputs.policy_actions[i];
        if acts.is_empty() {
            return Err(invalid("regularizer needs at least one policy action per state"));
        }
        let v = reference_value(batch, i);
        let k = acts.len() as f64;
        let mut calibrated = 0.0;
        for a in acts {
            let tape = q.forward_tape(&state_action(&t.state, a))?;
            let qp = tape.output()[0];
            let active = v.is_none_or(|v| qp >= v);
            calibrated += if active { qp } else { v.unwrap_or(qp) };
            if active {
                q.backward(&tape, &[reg / (n * k)], &mut grad)?;
            }
        }
        reg_total += calibrated / k - qd;
    }
    Ok((td / n + alpha * reg_total / n, grad))
}

/// Cal-QL critic loss of one Q-network on the whole batch.
pub fn calql_critic_base(q: &Mlp, batch: &Batch, inputs: &CalqlInputs, alpha: f64) -> Result<(f64, Vec<f64>)> {
    calql_kernel(q, batch, inputs, &vec![true; batch.len()], alpha)
}

/// Cal-QL critic loss with the regularizer restricted to the offline-like stratum.
pub fn calql_critic_strat(
    q: &Mlp,
    batch: &Batch,
    inputs: &CalqlInputs,
    in_off: &[bool],
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    check_mask(batch, in_off)?;
    calql_kernel(q, batch, inputs, in_off, alpha)
}

fn value_kernel<F>(v: &Mlp, batch: &Batch, q_min_target: &[f64], mut per_sample: F) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(usize, f64) -> (f64, f64),
{
    let n = nonempty(batch)?;
    check_dims("target q-values", batch.len(), q_min_target.len())?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; v.param_count()];
    for (i, t) in batch.transitions.iter().enumerate() {
        let tape = v.forward_tape(&t.state)?;
        let u = q_min_target[i] - tape.output()[0];
        let (l, dl_du) = per_sample(i, u);
        loss += l;
        v.backward(&tape, &[-dl_du / n], &mut grad)?;
    }
    Ok((loss / n, grad))
}

/// IQL value loss `mean_i L_tau(Q_i - V(s_i))`.
pub fn iql_value_base(v: &Mlp, batch: &Batch, q_min_target: &[f64], tau: Expectile) -> Result<(f64, Vec<f64>)> {
    value_kernel(v, batch, q_min_target, |_, u| (expectile_loss(u, tau), expectile_loss_grad(u, tau)))
}

/// Expectile `tau` on the offline-like stratum, `tau_online` on the rest.
pub fn iql_value_strat(
    v: &Mlp,
    batch: &Batch,
    q_min_target: &[f64],
    in_off: &[bool],
    tau: Expectile,
    tau_online: Expectile,
) -> Result<(f64, Vec<f64>)> {
    check_mask(batch, in_off)?;
    value_kernel(v, batch, q_min_target, |i, u| {
        let tau = if in_off[i] { tau } else { tau_online };
        (expectile_loss(u, tau), expectile_loss_grad(u, tau))
    })
}

/// Expectile on the offline-like stratum, signed residual `Q - V` on the rest.
/// Both sums are divided by the batch size.
pub fn iql_value_adv(
    v: &Mlp,
    batch: &Batch,
    q_min_target: &[f64],
    in_off: &[bool],
    tau: Expectile,
) -> Result<(f64, Vec<f64>)> {
    check_mask(batch, in_off)?;
    value_kernel(v, batch, q_min_target, |i, u| {
        if in_off[i] {
            (expectile_loss(u, tau), expectile_loss_grad(u, tau))
        } else {
            (u, 1.0)
        }
    })
}

/// `mean_i (y_i - Q(s_i, a_i))^2`.
pub fn q_regression(q: &Mlp, batch: &Batch, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = nonempty(batch)?;
    check_dims("q targets", batch.len(), targets.len())?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; q.param_count()];
    for (t, y) in batch.transitions.iter().zip(targets) {
        let tape = q.forward_tape(&state_action(&t.state, &t.action))?;
        let d = tape.output()[0] - y;
        loss += d * d;
        q.backward(&tape, &[2.0 * d / n], &mut grad)?;
    }
    Ok((loss / n, grad))
}

fn bootstrap(batch: &Batch, i: usize, gamma: f64, next: f64) -> f64 {
    let t = &batch.transitions[i];
    if t.terminal {
        t.reward
    } else {
        t.reward + gamma * next
    }
}

/// IQL targets `r + gamma (1 - terminal) V(s')`.
pub fn iql_targets_base(batch: &Batch, v_next: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_dims("next-state values", batch.len(), v_next.len())?;
    Ok((0..batch.len()).map(|i| bootstrap(batch, i, gamma, v_next[i])).collect())
}

/// Offline-like samples bootstrap from `V(s')`, online-like ones from the
/// sampled maximum of the target Q at `s'`.
pub fn iql_targets_strat(
    batch: &Batch,
    v_next: &[f64],
    max_next: &[Option<f64>],
    in_off: &[bool],
    gamma: f64,
) -> Result<Vec<f64>> {
    check_dims("next-state values", batch.len(), v_next.len())?;
    check_dims("next-state maxima", batch.len(), max_next.len())?;
    check_mask(batch, in_off)?;
    (0..batch.len())
        .map(|i| {
            let next = if in_off[i] {
                v_next[i]
            } else {
                max_next[i].ok_or_else(|| invalid("online-like sample without a sampled maximum"))?
            };
            Ok(bootstrap(batch, i, gamma, next))
        })
        .collect()
}

/// `min(exp(beta * advantage), clip)`.
pub fn awr_weight(advantage: f64, beta: f64, clip: f64) -> f64 {
    float::exp(beta * advantage).min(clip)
}

/// Advantage-weighted negative log-likelihood of the batch actions.
/// Returns the loss and gradients for the mean network and the log-std.
pub fn awr_loss(
    policy: &GaussianPolicy,
    batch: &Batch,
    advantages: &[f64],
    beta: f64,
    clip: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = nonempty(batch)?;
    check_dims("advantages", batch.len(), advantages.len())?;
    let mut g_net = vec![0.0; policy.net().param_count()];
    let mut g_std = vec![0.0; policy.log_std().len()];
    let mut loss = 0.0;
    for (t, &adv) in batch.transitions.iter().zip(advantages) {
        let w = awr_weight(adv, beta, clip);
        loss += w * policy.nll_backward(&t.state, &t.action, w / n, &mut g_net, &mut g_std)?;
    }
    Ok((loss / n, g_net, g_std))
}

/// Squashed-Gaussian actor loss `mean_i (temperature * log pi(a_i|s_i) - min_j Q_j(s_i, a_i))`
/// with `a_i` reparameterised from `noise[i]`. Returns the loss, the policy
/// gradient and the mean log-probability.
pub fn sac_actor_loss(
    policy: &SquashedGaussian,
    q1: &Mlp,
    q2: &Mlp,
    states: &[Vec<f64>],
    noise: &[Vec<f64>],
    temperature: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    check_dims("actor noise", states.len(), noise.len())?;
    if states.is_empty() {
        return Err(invalid("empty batch"));
    }
    let n = states.len() as f64;
    let mut grad = vec![0.0; policy.net().param_count()];
    let mut loss = 0.0;
    let mut mean_lp = 0.0;
    for (s, z) in states.iter().zip(noise) {
        let smp = policy.sample_with_noise(s, z.clone())?;
        let x = state_action(s, &smp.action);
        let t1 = q1.forward_tape(&x)?;
        let t2 = q2.forward_tape(&x)?;
        let (q, tape, net) = if t1.output()[0] <= t2.output()[0] {
            (t1.output()[0], &t1, q1)
        } else {
            (t2.output()[0], &t2, q2)
        };
        let g_in = net.input_grad(tape, &[1.0])?;
        let g_action: Vec<f64> = g_in[s.len()..].iter().map(|g| -g / n).collect();
        policy.backward(&smp, &g_action, temperature / n, &mut grad)?;
        loss += temperature * smp.log_prob - q;
        mean_lp += smp.log_prob;
    }
    Ok((loss / n, grad, mean_lp / n))
}

/// Temperature objective `-log_alpha * (mean log pi + target_entropy)` and its derivative.
pub fn temperature_loss(log_alpha: f64, mean_log_prob: f64, target_entropy: f64) -> (f64, f64) {
    let g = -(mean_log_prob + target_entropy);
    (log_alpha * g, g)
}

