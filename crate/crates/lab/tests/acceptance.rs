//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `STRATDIFF_ACCEPTANCE=1,4,7` restricts the run to the listed criteria.

use std::error::Error;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::Rng;
use stratdiff_core::agents::{
    awr_loss, calql_critic_base, calql_critic_strat, iql_targets_strat, iql_value_adv, iql_value_base,
    iql_value_strat, offline_mask, q_regression, sac_actor_loss, temperature_loss, Agent, AgentConfig, Backbone,
    GaussianPolicy, SquashedGaussian,
};
use stratdiff_core::diffusion::{BehaviorModel, DiffusionConfig};
use stratdiff_core::energy::{EnergyConfig, EnergyNet};
use stratdiff_core::envs::{env_reset, env_step, generate_dataset, EnvKind, Origin, Quality, Transition};
use stratdiff_core::harness::{Lab, MetricsRecord, Phase, RunConfig};
use stratdiff_core::math::{kl_alignment, DiffusionSchedule, Expectile};
use stratdiff_core::nn::{grad_check, Mlp, TIME_EMBED_DIM};
use stratdiff_core::replay::{sample_mixed, Batch, ReplayBuffer};
use stratdiff_core::rng::{self, streams, substream, ChaCha8Rng};
use stratdiff_core::stratify::{alignment_scores, stratify, Scored};
use stratdiff_lab::run::{self, RunDir, Variant};
use stratdiff_lab::{cli, metrics};

type Res<T> = Result<T, Box<dyn Error>>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Res<Verdict> {
    Ok(Verdict { pass, detail })
}

const REDUCTION_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;
const CEP_TOL: f64 = 1e-9;
const TILT_TOL: f64 = 0.05;
const MODE_RADIUS: f64 = 0.15;
const MIN_INSIDE: f64 = 0.95;
const MODE_FREQ_TOL: f64 = 0.10;
const PROPTEST_CASES: u32 = 1000;

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Res<Verdict>,
}

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("STRATDIFF_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mins = |m: u64| Some(Duration::from_secs(60 * m));
    let criteria = [
        Criterion { id: 1, name: "tilted-gaussian guidance", limit: mins(5), run: tilted_gaussian },
        Criterion { id: 2, name: "behavior-model fidelity", limit: mins(5), run: four_modes },
        Criterion { id: 3, name: "gradient suite", limit: mins(2), run: gradient_suite },
        Criterion { id: 4, name: "reduction identities", limit: None, run: reductions },
        Criterion { id: 5, name: "stratification properties", limit: None, run: stratification },
        Criterion { id: 6, name: "exchange cap", limit: None, run: exchange_cap },
        Criterion { id: 7, name: "contrastive loss values", limit: None, run: cep_values },
        Criterion { id: 8, name: "directional end-to-end", limit: mins(60), run: end_to_end },
        Criterion { id: 9, name: "determinism", limit: None, run: determinism },
    ];
    let mut failed = 0;
    for c in &criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&c.id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run));
        let elapsed = start.elapsed();
        let (mut pass, mut detail) = match outcome {
            Ok(Ok(v)) => (v.pass, v.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, String::from("panicked")),
        };
        let budget = match c.limit {
            Some(limit) => {
                if elapsed > limit {
                    pass = false;
                    detail.push_str("; over time budget");
                }
                format!("{:.1}s of {}s", elapsed.as_secs_f64(), limit.as_secs())
            }
            None => format!("{:.1}s", elapsed.as_secs_f64()),
        };
        if !pass {
            failed += 1;
        }
        println!("{} C{} {}: {} [{}]", if pass { "PASS" } else { "FAIL" }, c.id, c.name, detail, budget);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn mean_cols(xs: &[Vec<f64>]) -> Vec<f64> {
    let n = xs.len() as f64;
    (0..xs[0].len()).map(|d| xs.iter().map(|x| x[d]).sum::<f64>() / n).collect()
}

// ---- 1 ----------------------------------------------------------------------

fn tilted_gaussian() -> Res<Verdict> {
    let mu0 = [0.1, -0.2];
    let var0: f64 = 0.04;
    let g = [1.0, 0.5];
    let beta = 3.0;
    let q = |a: &[f64]| g[0] * a[0] + g[1] * a[1];
    let state = vec![0.0, 0.0];
    let mut rng = substream(11, 1);

    let cfg = DiffusionConfig { batch_size: 256, ..DiffusionConfig::default() };
    let mut behavior = BehaviorModel::new(2, 2, &cfg, &mut rng)?;
    let states = vec![state.clone(); cfg.batch_size];
    for _ in 0..6000 {
        let actions: Vec<Vec<f64>> = (0..cfg.batch_size)
            .map(|_| (0..2).map(|d| mu0[d] + var0.sqrt() * rng::normal(&mut rng)).collect())
            .collect();
        behavior.train_on(&states, &actions, &mut rng)?;
    }

    let pool: Vec<Vec<f64>> = (0..4000).map(|_| behavior.sample_unguided(&state, &mut rng)).collect::<Result<_, _>>()?;
    let ecfg = EnergyConfig {
        beta,
        guidance_scale: 1.0,
        support_size: 16,
        hidden_dims: vec![64, 64],
        ..EnergyConfig::default()
    };
    let mut energy = EnergyNet::new(2, 2, &ecfg, &mut rng)?;
    let m = 32;
    for _ in 0..2000 {
        let supports: Vec<Vec<Vec<f64>>> = (0..m)
            .map(|_| (0..ecfg.support_size).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect())
            .collect();
        let labels: Vec<Vec<f64>> = supports.iter().map(|s| s.iter().map(|a| q(a)).collect()).collect();
        energy.train_on_supports(&vec![state.clone(); m], &supports, &labels, behavior.schedule(), &mut rng)?;
    }

    let guided: Vec<Vec<f64>> =
        (0..2000).map(|_| energy.sample_guided(&behavior, &state, &mut rng)).collect::<Result<_, _>>()?;
    let guided = mean_cols(&guided);
    let closed: Vec<f64> = (0..2).map(|d| mu0[d] + beta * var0 * g[d]).collect();
    let weights: Vec<f64> = pool.iter().map(|a| (beta * q(a)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let snis: Vec<f64> = (0..2).map(|d| pool.iter().zip(&weights).map(|(a, w)| a[d] * w).sum::<f64>() / total).collect();

    let err_closed = (0..2).map(|d| (guided[d] - closed[d]).abs()).fold(0.0, f64::max);
    let err_snis = (0..2).map(|d| (guided[d] - snis[d]).abs()).fold(0.0, f64::max);
    verdict(
        err_closed <= TILT_TOL && err_snis <= TILT_TOL,
        format!(
            "guided mean ({:.3}, {:.3}), closed form ({:.3}, {:.3}), importance-sampled ({:.3}, {:.3}); max error {:.3} / {:.3} vs {TILT_TOL}",
            guided[0], guided[1], closed[0], closed[1], snis[0], snis[1], err_closed, err_snis
        ),
    )
}

// ---- 2 ----------------------------------------------------------------------

fn four_modes() -> Res<Verdict> {
    let modes = [[0.8, 0.8], [0.8, -0.8], [-0.8, 0.8], [-0.8, -0.8]];
    let sd = 0.05;
    let state = vec![0.0, 0.0];
    let mut rng = substream(12, 1);
    let cfg = DiffusionConfig::default();
    let mut behavior = BehaviorModel::new(2, 2, &cfg, &mut rng)?;
    let states = vec![state.clone(); cfg.batch_size];
    for _ in 0..15_000 {
        let actions: Vec<Vec<f64>> = (0..cfg.batch_size)
            .map(|_| {
                let m = modes[rng.random_range(0..4)];
                vec![m[0] + sd * rng::normal(&mut rng), m[1] + sd * rng::normal(&mut rng)]
            })
            .collect();
        behavior.train_on(&states, &actions, &mut rng)?;
    }
    let n = 1000;
    let mut inside = 0;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let a = behavior.sample_unguided(&state, &mut rng)?;
        let (k, dist) = modes
            .iter()
            .map(|m| ((a[0] - m[0]).powi(2) + (a[1] - m[1]).powi(2)).sqrt())
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        counts[k] += 1;
        if dist < MODE_RADIUS {
            inside += 1;
        }
    }
    let share = inside as f64 / n as f64;
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let balanced = freqs.iter().all(|f| (f - 0.25).abs() <= MODE_FREQ_TOL);
    verdict(
        share >= MIN_INSIDE && balanced,
        format!("{:.1}% within {MODE_RADIUS} of a mode (need {:.0}%), mode frequencies {freqs:?}", 100.0 * share, 100.0 * MIN_INSIDE),
    )
}

// ---- 3 ----------------------------------------------------------------------

fn random_batch(n: usize, seed: u64) -> Batch {
    let mut rng = substream(seed, 99);
    let transitions = (0..n)
        .map(|i| Transition {
            state: rng::normal_vec(&mut rng, 2),
            action: (0..2).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect(),
            reward: rng::normal(&mut rng),
            next_state: rng::normal_vec(&mut rng, 2),
            done: i % 5 == 4,
            terminal: i % 7 == 6,
            return_to_go: 3.0 * rng::normal(&mut rng),
            origin: if i % 2 == 0 { Origin::Offline } else { Origin::Online },
        })
        .collect();
    Batch::from_transitions(transitions)
}

fn small_agent(backbone: Backbone, seed: u64) -> Res<Agent> {
    let config = AgentConfig { hidden_dims: vec![16, 16], ..AgentConfig::for_env(backbone, EnvKind::PointmassSparse) };
    Ok(Agent::new(2, 2, config, &mut substream(seed, 0))?)
}

fn gradient_suite() -> Res<Verdict> {
    const PROBES: usize = 20;
    let mut rng = substream(13, 1);
    let mut results: Vec<(&str, f64)> = Vec::new();
    let b = random_batch(12, 13);
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();

    let calql = small_agent(Backbone::Calql, 13)?;
    let q = calql.q1();
    let q_spec = q.spec().clone();
    let inputs = calql.prepare_calql(&b, &mut substream(13, 2))?;
    let alpha = calql.config().alpha;
    let with_q = |p: &[f64]| Mlp::from_params(q_spec.clone(), p.to_vec());
    results.push((
        "calql critic",
        grad_check(|p| calql_critic_base(&with_q(p)?, &b, &inputs, alpha), q.params(), PROBES, &mut rng)?,
    ));
    results.push((
        "stratified calql critic",
        grad_check(|p| calql_critic_strat(&with_q(p)?, &b, &inputs, &mask, alpha), q.params(), PROBES, &mut rng)?,
    ));

    let iql = small_agent(Backbone::Iql, 14)?;
    let v = iql.value_net().ok_or("iql agent has no value net")?;
    let v_spec = v.spec().clone();
    let with_v = |p: &[f64]| Mlp::from_params(v_spec.clone(), p.to_vec());
    let q_t = iql.target_q_values(&b)?;
    let tau = Expectile::new(iql.config().tau_expectile)?;
    let tau_on = Expectile::new(iql.config().tau_online)?;
    results.push(("iql value", grad_check(|p| iql_value_base(&with_v(p)?, &b, &q_t, tau), v.params(), PROBES, &mut rng)?));
    results.push((
        "stratified iql value",
        grad_check(|p| iql_value_strat(&with_v(p)?, &b, &q_t, &mask, tau, tau_on), v.params(), PROBES, &mut rng)?,
    ));
    results.push((
        "advantage value",
        grad_check(|p| iql_value_adv(&with_v(p)?, &b, &q_t, &mask, tau), v.params(), PROBES, &mut rng)?,
    ));
    let iq = iql.q1();
    let iq_spec = iq.spec().clone();
    let v_next: Vec<f64> = (0..12).map(|i| 0.1 * i as f64).collect();
    let maxima = iql.iql_sampled_maxima(&b, &mask, None, &mut substream(14, 2))?;
    let targets = iql_targets_strat(&b, &v_next, &maxima, &mask, iql.config().gamma)?;
    results.push((
        "q regression",
        grad_check(|p| q_regression(&Mlp::from_params(iq_spec.clone(), p.to_vec())?, &b, &targets), iq.params(), PROBES, &mut rng)?,
    ));

    let ecfg = EnergyConfig { hidden_dims: vec![16, 16], support_size: 4, ..EnergyConfig::default() };
    let energy = EnergyNet::new(2, 2, &ecfg, &mut substream(15, 0))?;
    let sched = DiffusionSchedule::vp_linear(10)?;
    let mut r = substream(15, 1);
    let states: Vec<Vec<f64>> = (0..5).map(|_| rng::normal_vec(&mut r, 2)).collect();
    let supports: Vec<Vec<Vec<f64>>> = (0..5).map(|_| (0..4).map(|_| rng::normal_vec(&mut r, 2)).collect()).collect();
    let labels: Vec<Vec<f64>> = (0..5).map(|_| rng::normal_vec(&mut r, 4)).collect();
    let ts = vec![0, 9, 4, 2, 7];
    let eps: Vec<Vec<Vec<f64>>> = (0..5).map(|_| (0..4).map(|_| rng::normal_vec(&mut r, 2)).collect()).collect();
    let f_spec = energy.f_net().spec().clone();
    results.push((
        "contrastive energy",
        grad_check(
            |p| {
                let e = EnergyNet::from_parts(Mlp::from_params(f_spec.clone(), p.to_vec())?, &ecfg, 2, 2)?;
                e.cep_loss_at(&states, &supports, &labels, &ts, &eps, &sched)
            },
            energy.f_net().params(),
            PROBES,
            &mut rng,
        )?,
    ));

    let policy = iql.gaussian_policy().ok_or("iql agent has no gaussian policy")?;
    let net_spec = policy.net().spec().clone();
    let n_net = policy.net().param_count();
    let mut params = policy.net().params().to_vec();
    params.extend([0.3, -0.2]);
    let adv: Vec<f64> = (0..12).map(|i| 0.1 * i as f64 - 0.5).collect();
    results.push((
        "advantage-weighted regression",
        grad_check(
            |p| {
                let pol = GaussianPolicy::from_parts(Mlp::from_params(net_spec.clone(), p[..n_net].to_vec())?, p[n_net..].to_vec())?;
                let (l, mut g, g_std) = awr_loss(&pol, &b, &adv, 3.0, 100.0)?;
                g.extend(g_std);
                Ok((l, g))
            },
            &params,
            PROBES,
            &mut rng,
        )?,
    ));

    let actor = calql.squashed_policy().ok_or("calql agent has no squashed policy")?;
    let a_spec = actor.net().spec().clone();
    let states: Vec<Vec<f64>> = b.transitions.iter().map(|t| t.state.clone()).collect();
    let noise: Vec<Vec<f64>> = (0..12).map(|_| rng::normal_vec(&mut r, 2)).collect();
    results.push((
        "actor",
        grad_check(
            |p| {
                let pol = SquashedGaussian::from_net(Mlp::from_params(a_spec.clone(), p.to_vec())?);
                let (l, g, _) = sac_actor_loss(&pol, calql.q1(), calql.q2(), &states, &noise, 0.3)?;
                Ok((l, g))
            },
            actor.net().params(),
            PROBES,
            &mut rng,
        )?,
    ));

    let dcfg = DiffusionConfig { timesteps: 10, hidden_dims: vec![16, 16], ..DiffusionConfig::default() };
    let behavior = BehaviorModel::new(2, 2, &dcfg, &mut substream(16, 0))?;
    let actions: Vec<Vec<f64>> = b.transitions.iter().map(|t| t.action.clone()).collect();
    let ts: Vec<usize> = (0..12).map(|i| i % 10).collect();
    let eps: Vec<Vec<f64>> = (0..12).map(|_| rng::normal_vec(&mut r, 2)).collect();
    results.push((
        "noise prediction",
        grad_check(
            |p| {
                let mut m = behavior.clone();
                m.eps_net_mut().set_params(p)?;
                m.noise_prediction_loss(&states, &actions, &ts, &eps)
            },
            behavior.eps_net().params(),
            PROBES,
            &mut rng,
        )?,
    ));

    let (h, log_alpha, mean_lp, target) = (1e-5, 0.3, -1.7, -2.0);
    let (_, g) = temperature_loss(log_alpha, mean_lp, target);
    let numeric = (temperature_loss(log_alpha + h, mean_lp, target).0 - temperature_loss(log_alpha - h, mean_lp, target).0) / (2.0 * h);
    results.push(("temperature", (g - numeric).abs() / g.abs().max(numeric.abs())));

    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let bad: Vec<&str> = results.iter().filter(|r| !(r.1 < GRAD_TOL)).map(|r| r.0).collect();
    verdict(
        bad.is_empty(),
        format!("{} losses, worst relative error {worst:.2e} (limit {GRAD_TOL:e}); failing: {bad:?}", results.len()),
    )
}

// ---- 4 ----------------------------------------------------------------------

fn reductions() -> Res<Verdict> {
    let mut worst: f64 = 0.0;
    let mut note = |x: f64, y: f64| worst = worst.max((x - y).abs());

    for seed in 0..5 {
        let b = random_batch(32, 20 + seed);
        let scores: Vec<f64> = (0..32).map(|i| ((i * 7 + seed as usize) % 13) as f64).collect();
        let all_off = stratify(&b, &scores, 1.0)?;
        if !all_off.b_on.is_empty() {
            return verdict(false, String::from("rho = 1 left samples online-like"));
        }

        let calql = small_agent(Backbone::Calql, 20 + seed)?;
        let inputs = calql.prepare_calql(&b, &mut substream(seed, 1))?;
        note(calql.calql_critic_loss(&b, &inputs)?, calql.calql_critic_loss_strat(&b, &all_off, &inputs)?);
        let mask = offline_mask(&all_off);
        let alpha = calql.config().alpha;
        let (lb, gb) = calql_critic_base(calql.q1(), &b, &inputs, alpha)?;
        let (ls, gs) = calql_critic_strat(calql.q1(), &b, &inputs, &mask, alpha)?;
        note(lb, ls);
        gb.iter().zip(&gs).for_each(|(x, y)| note(*x, *y));

        let iql = small_agent(Backbone::Iql, 30 + seed)?;
        note(iql.iql_value_loss(&b)?, iql.iql_value_loss_strat(&b, &all_off)?);
        let maxima = iql.iql_sampled_maxima(&b, &mask, None, &mut substream(seed, 2))?;
        note(iql.iql_q_loss(&b)?, iql.iql_q_loss_strat(&b, &all_off, &maxima)?);
    }
    let losses_ok = worst < REDUCTION_TOL;

    // zero guidance scale
    let dcfg = DiffusionConfig { timesteps: 20, hidden_dims: vec![16, 16], ..DiffusionConfig::default() };
    let behavior = BehaviorModel::new(2, 2, &dcfg, &mut substream(40, 0))?;
    let ecfg = EnergyConfig { hidden_dims: vec![16, 16], guidance_scale: 0.0, ..EnergyConfig::default() };
    let energy = EnergyNet::new(2, 2, &ecfg, &mut substream(40, 1))?;
    let mut identical = true;
    for k in 0..50 {
        let s = rng::normal_vec(&mut substream(41, k), 2);
        let guided = energy.sample_guided(&behavior, &s, &mut substream(42, k))?;
        let plain = behavior.sample_unguided(&s, &mut substream(42, k))?;
        identical &= guided.iter().zip(&plain).all(|(x, y)| x.to_bits() == y.to_bits());
    }

    // use_stratification = false against a hand-built base loop
    let mut step_worst: f64 = 0.0;
    let mut compared = 0;
    for backbone in [Backbone::Calql, Backbone::Iql] {
        let (d, n) = base_loop_gap(backbone)?;
        step_worst = step_worst.max(d);
        compared += n;
    }
    let loop_ok = step_worst < REDUCTION_TOL;

    verdict(
        losses_ok && identical && loop_ok,
        format!(
            "rho=1 / empty online stratum max gap {worst:.1e}; zero-scale sampler bitwise equal: {identical}; \
             no-stratification vs base loop max gap {step_worst:.1e} over {compared} steps (limit {REDUCTION_TOL:e})"
        ),
    )
}

fn small_run(backbone: Backbone) -> RunConfig {
    let mut c = RunConfig::new(EnvKind::PointmassSparse, backbone);
    c.agent.hidden_dims = vec![16, 16];
    c.agent.max_q_samples = 3;
    c.diffusion.hidden_dims = vec![16, 16];
    c.diffusion.timesteps = 5;
    c.diffusion.train_steps = 20;
    c.diffusion.batch_size = 16;
    c.energy.hidden_dims = vec![16, 16];
    c.energy.support_size = 4;
    c.energy.train_steps = 10;
    c.energy.batch_size = 8;
    c.offline_steps = 40;
    c.online_steps = 60;
    c.batch_size = 16;
    c.eval_every = 1;
    c.eval_episodes = 1;
    c.reference_episodes = 2;
    c.seed = 17;
    c
}

/// Largest per-step loss gap between a no-stratification fine-tuning run and
/// the same steps replayed with the base update, and the number of steps compared.
fn base_loop_gap(backbone: Backbone) -> Res<(f64, usize)> {
    let mut c = small_run(backbone);
    c.agent.use_stratification = false;
    let data = generate_dataset(&c.env, Quality::Medium, 600, c.agent.gamma, 3)?;
    let mut lab = Lab::new(c.clone(), &data)?;
    lab.offline_pretrain(&mut |_: &MetricsRecord| Ok(()))?;
    let mut agent = lab.agent().clone();
    let norm = lab.normalizer().clone();
    let mut recs = Vec::new();
    lab.finetune(&mut |r: &MetricsRecord| {
        recs.push(r.clone());
        Ok(())
    })?;

    let env = c.env.clone();
    let offline = ReplayBuffer::from_dataset(&data)?;
    let mut online = ReplayBuffer::new(c.online_capacity, Origin::Online)?;
    let mut env_rng = substream(c.seed, streams::ENV);
    let mut rng = substream(c.seed, streams::ONLINE);
    let mut state = env_reset(&env, &mut env_rng);
    let mut t_in_episode = 0;
    let mut worst: f64 = 0.0;
    let gap = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    for step in 1..=c.online_steps {
        let action: Vec<f64> = agent.act_explore(&norm.apply(&state), &mut rng)?.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let out = env_step(&env, &state, &action)?;
        t_in_episode += 1;
        let done = out.terminal || t_in_episode == env.horizon;
        let next = out.next_state.clone();
        online.insert(Transition {
            state: state.clone(),
            action,
            reward: out.reward,
            next_state: out.next_state,
            done,
            terminal: out.terminal,
            return_to_go: 0.0,
            origin: Origin::Online,
        })?;
        state = if done {
            t_in_episode = 0;
            env_reset(&env, &mut env_rng)
        } else {
            next
        };
        let mut batch = sample_mixed(&offline, &online, c.batch_size, c.agent.rho, &mut rng)?;
        norm.apply_batch(&mut batch);
        let stats = agent.update_base(&batch, &mut rng)?;
        let rec = recs.iter().find(|r| r.phase == Phase::Online && r.step == step).ok_or("missing record")?;
        worst = worst
            .max(gap(rec.critic_loss, Some(stats.critic_loss)))
            .max(gap(rec.policy_loss, Some(stats.policy_loss)))
            .max(gap(rec.value_loss, stats.value_loss))
            .max(gap(rec.temperature, stats.temperature));
    }
    for (x, y) in agent.q1().params().iter().zip(lab.agent().q1().params()) {
        worst = worst.max((x - y).abs());
    }
    Ok((worst, c.online_steps))
}

// ---- 5 ----------------------------------------------------------------------

/// Position of sample `i` under ascending score, offline origin first, then index.
fn rank(i: usize, scores: &[f64], origins: &[Origin]) -> usize {
    (0..scores.len())
        .filter(|&j| {
            scores[j] < scores[i]
                || (scores[j] == scores[i]
                    && ((origins[j] == Origin::Offline && origins[i] == Origin::Online) || (origins[j] == origins[i] && j < i)))
        })
        .count()
}

fn batch_of(origins: &[Origin], actions: &[Vec<f64>]) -> Batch {
    let transitions = origins
        .iter()
        .zip(actions)
        .enumerate()
        .map(|(i, (&origin, a))| Transition {
            state: vec![i as f64, 0.0],
            action: a.clone(),
            reward: 0.0,
            next_state: vec![0.0, 0.0],
            done: false,
            terminal: false,
            return_to_go: 0.0,
            origin,
        })
        .collect();
    Batch::from_transitions(transitions)
}

fn indices(s: &[Scored]) -> Vec<usize> {
    s.iter().map(|x| x.index).collect()
}

fn stratification() -> Res<Verdict> {
    let config = Config { cases: PROPTEST_CASES, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let strategy = (1usize..80)
        .prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..12, n),
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec((-4i8..=4, -4i8..=4, -4i8..=4, -4i8..=4), n),
                0usize..4,
                (0.05f64..5.0, 0.05f64..5.0),
            )
        });
    let result = runner.run(&strategy, |(levels, online, grid, rho_pick, (s1, s2))| {
        let n = levels.len();
        let rho = [0.0, 0.25, 0.5, 1.0][rho_pick];
        let origins: Vec<Origin> = online.iter().map(|&o| if o { Origin::Online } else { Origin::Offline }).collect();
        let actions: Vec<Vec<f64>> = grid.iter().map(|g| vec![g.0 as f64 / 4.0, g.1 as f64 / 4.0]).collect();
        let generated: Vec<Vec<f64>> = grid.iter().map(|g| vec![g.2 as f64 / 4.0, g.3 as f64 / 4.0]).collect();
        let b = batch_of(&origins, &actions);

        // sizes and ordering on scores with many ties
        let scores: Vec<f64> = levels.iter().map(|&l| l as f64 * 0.5).collect();
        let st = stratify(&b, &scores, rho).unwrap();
        let n_off = (rho * n as f64).floor() as usize;
        prop_assert_eq!(st.b_off.len(), n_off);
        prop_assert_eq!(st.b_on.len(), n - n_off);
        for (pos, s) in st.b_off.iter().chain(&st.b_on).enumerate() {
            prop_assert_eq!(rank(s.index, &scores, &origins), pos);
        }

        // ranking does not depend on the KL width
        let score_with = |sigma: f64| {
            let mut k = 0;
            alignment_scores(
                &b,
                |_: &[f64], _: &mut ChaCha8Rng| {
                    k += 1;
                    Ok(generated[k - 1].clone())
                },
                sigma,
                1,
                &mut substream(0, 0),
            )
            .unwrap()
        };
        let (a1, a2) = (score_with(s1), score_with(s2));
        for i in 0..n {
            let direct = kl_alignment(&actions[i], &generated[i], s1).unwrap();
            prop_assert_eq!(a1[i], direct);
        }
        let x = stratify(&b, &a1, rho).unwrap();
        let y = stratify(&b, &a2, rho).unwrap();
        prop_assert_eq!(indices(&x.b_off), indices(&y.b_off));
        prop_assert_eq!(indices(&x.b_on), indices(&y.b_on));
        Ok(())
    });
    match result {
        Ok(()) => verdict(
            true,
            format!("{PROPTEST_CASES} random batches: stratum sizes, rank-counting order and sigma_kl invariance exact"),
        ),
        Err(e) => verdict(false, format!("counterexample: {e}")),
    }
}

// ---- 6 ----------------------------------------------------------------------

fn desk_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::new(EnvKind::PointmassSparse, Backbone::Calql);
    c.agent.hidden_dims = vec![32, 32];
    c.diffusion.hidden_dims = vec![32, 32];
    c.diffusion.timesteps = 20;
    c.diffusion.train_steps = 3000;
    c.diffusion.batch_size = 64;
    c.energy.hidden_dims = vec![32, 32];
    c.energy.train_steps = 500;
    c.energy.batch_size = 16;
    c.energy.support_size = 8;
    c.batch_size = 64;
    c.eval_episodes = 10;
    c.seed = seed;
    c
}

fn exchange_cap() -> Res<Verdict> {
    let tmp = tempfile::tempdir()?;
    let mut c = desk_config(5);
    c.offline_steps = 500;
    c.online_steps = 400;
    c.eval_every = 50;
    c.diffusion.train_steps = 500;
    c.energy.train_steps = 100;
    c.dataset = tmp.path().join("d.sdd").to_string_lossy().into_owned();
    run::gen_data(&c.env, Quality::Medium, 5000, c.agent.gamma, 5, tmp.path().join("d.sdd").as_path())?;
    let pre = RunDir::create(tmp.path().join("pre"))?;
    run::train_offline(&c, &pre)?;

    let uncapped = run::ablate(&c, Variant::ExchangeCap(None), &RunDir::create(tmp.path().join("free"))?, Some(&pre))?;
    let free_max = uncapped.exchange_log().iter().copied().max().unwrap_or(0);
    let mut ok = true;
    let mut parts = Vec::new();
    for cap in [0usize, 8, 16] {
        let dir = RunDir::create(tmp.path().join(format!("nc{cap}")))?;
        let lab = run::ablate(&c, Variant::ExchangeCap(Some(cap)), &dir, Some(&pre))?;
        let log = lab.exchange_log();
        let recs = metrics::read(&dir.metrics())?;
        let logged: Vec<usize> =
            recs.iter().flat_map(|r| r.exchange_count.into_iter().chain(r.exchange_count_max)).collect();
        let full = log.len() == c.online_steps * c.agent.utd;
        let within = log.iter().all(|&e| e <= cap) && logged.iter().all(|&e| e <= cap);
        ok &= full && within && !logged.is_empty();
        parts.push(format!("n_c={cap}: {} batches, max {}", log.len(), log.iter().max().unwrap_or(&0)));
    }
    verdict(ok, format!("{}; uncapped max {free_max}", parts.join(", ")))
}

// ---- 7 ----------------------------------------------------------------------

fn cep_values() -> Res<Verdict> {
    let sched = DiffusionSchedule::vp_linear(20)?;
    let mut r = substream(70, 0);
    let mut worst_lnk: f64 = 0.0;
    for k in [2usize, 4, 8, 16] {
        let cfg = EnergyConfig { hidden_dims: vec![16, 16], support_size: k, ..EnergyConfig::default() };
        let mut e = EnergyNet::new(2, 2, &cfg, &mut r)?;
        e.f_net_mut().params_mut().iter_mut().for_each(|p| *p = 0.0);
        let states: Vec<Vec<f64>> = (0..6).map(|_| rng::normal_vec(&mut r, 2)).collect();
        let supports: Vec<Vec<Vec<f64>>> = (0..6).map(|_| (0..k).map(|_| rng::normal_vec(&mut r, 2)).collect()).collect();
        let labels: Vec<Vec<f64>> = (0..6).map(|m| vec![0.3 * m as f64 - 1.0; k]).collect();
        let loss = e.cep_loss(&states, &supports, &labels, &sched, &mut r)?;
        worst_lnk = worst_lnk.max((loss - (k as f64).ln()).abs());
    }

    let k = 6;
    let cfg = EnergyConfig { hidden_dims: vec![16, 16], support_size: k, ..EnergyConfig::default() };
    let e = EnergyNet::new(2, 2, &cfg, &mut r)?;
    let states: Vec<Vec<f64>> = (0..5).map(|_| rng::normal_vec(&mut r, 2)).collect();
    let supports: Vec<Vec<Vec<f64>>> = (0..5).map(|_| (0..k).map(|_| rng::normal_vec(&mut r, 2)).collect()).collect();
    let labels: Vec<Vec<f64>> = (0..5).map(|_| rng::normal_vec(&mut r, k)).collect();
    let shifted: Vec<Vec<f64>> =
        labels.iter().enumerate().map(|(m, q)| q.iter().map(|x| x + 25.0 * m as f64 - 40.0).collect()).collect();
    let ts: Vec<usize> = vec![0, 19, 7, 3, 12];
    let eps: Vec<Vec<Vec<f64>>> = (0..5).map(|_| (0..k).map(|_| rng::normal_vec(&mut r, 2)).collect()).collect();
    let (loss, _) = e.cep_loss_at(&states, &supports, &labels, &ts, &eps, &sched)?;
    let (moved, _) = e.cep_loss_at(&states, &supports, &shifted, &ts, &eps, &sched)?;
    let shift_gap = (loss - moved).abs();

    // cross-entropy between softmax(beta Q) and softmax(-f), built by hand
    let mut oracle = 0.0;
    for m in 0..5 {
        let ab = sched.alpha_bar(ts[m]);
        let w: Vec<f64> = labels[m].iter().map(|q| (e.beta() * q).exp()).collect();
        let wsum: f64 = w.iter().sum();
        let f: Vec<f64> = (0..k)
            .map(|j| {
                let a_t: Vec<f64> = (0..2).map(|d| ab.sqrt() * supports[m][j][d] + (1.0 - ab).sqrt() * eps[m][j][d]).collect();
                let mut x = states[m].clone();
                x.extend(&a_t);
                x.extend(embedding(ts[m]));
                e.f_net().forward(&x).map(|o| o[0])
            })
            .collect::<Result<_, _>>()?;
        let z: f64 = f.iter().map(|fj| (-fj).exp()).sum();
        for j in 0..k {
            oracle -= w[j] / wsum * (-f[j] - z.ln()) / 5.0;
        }
    }
    let oracle_gap = (loss - oracle).abs();
    verdict(
        worst_lnk < CEP_TOL && shift_gap < CEP_TOL && oracle_gap < CEP_TOL,
        format!(
            "equal labels and model vs ln K: {worst_lnk:.1e}; label shift: {shift_gap:.1e}; hand cross-entropy: {oracle_gap:.1e} (limit {CEP_TOL:e})"
        ),
    )
}

fn embedding(t: usize) -> Vec<f64> {
    let half = TIME_EMBED_DIM / 2;
    let mut out = vec![0.0; TIME_EMBED_DIM];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    out
}

// ---- 8 ----------------------------------------------------------------------

fn end_to_end() -> Res<Verdict> {
    let seeds = [0u64, 1, 2, 3, 4];
    let variants = [Variant::Base, Variant::Full, Variant::NoEnergy];
    let mut scores = vec![Vec::new(); variants.len()];
    for &seed in &seeds {
        let c = desk_config(seed);
        let data = generate_dataset(&c.env, Quality::Medium, 20_000, c.agent.gamma, seed)?;
        let mut pre = Lab::new(c.clone(), &data)?;
        pre.offline_pretrain(&mut |_: &MetricsRecord| Ok(()))?;
        for (v, out) in variants.iter().zip(scores.iter_mut()) {
            let mut lab = pre.clone();
            lab.set_config(v.apply(&c))?;
            let mut last = None;
            lab.finetune(&mut |r: &MetricsRecord| {
                last = Some(r.normalized_score);
                Ok(())
            })?;
            out.push(last.ok_or("no online record")?);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (base, full, no_energy) = (mean(&scores[0]), mean(&scores[1]), mean(&scores[2]));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(" ");
    verdict(
        full >= base && no_energy <= full,
        format!(
            "mean final normalized score: full {full:.2} [{}], base {base:.2} [{}], no-energy {no_energy:.2} [{}]",
            fmt(&scores[1]),
            fmt(&scores[0]),
            fmt(&scores[2])
        ),
    )
}

// ---- 9 ----------------------------------------------------------------------

fn determinism() -> Res<Verdict> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    let call = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_stratdiff"))
            .args(args)
            .env(cli::OUT_ENV, root)
            .output()
            .map_or(-1, |o| o.status.code().unwrap_or(-1))
    };
    if call(&["gen-data", "--n", "2000", "--out", "d.sdd", "--seed", "9"]) != 0 {
        return verdict(false, String::from("gen-data failed"));
    }
    let sets = [
        "dataset=d.sdd",
        "offline_steps=200",
        "online_steps=150",
        "batch_size=32",
        "eval_every=50",
        "eval_episodes=3",
        "reference_episodes=3",
        "diffusion.timesteps=10",
        "diffusion.train_steps=100",
        "diffusion.batch_size=32",
        "diffusion.hidden_dims=[16,16]",
        "energy.train_steps=30",
        "energy.batch_size=8",
        "energy.support_size=4",
        "energy.hidden_dims=[16,16]",
        "agent.hidden_dims=[16,16]",
    ];
    fn with_sets<'a>(head: &[&'a str], sets: &[&'a str]) -> Vec<&'a str> {
        let mut v = head.to_vec();
        for s in sets {
            v.extend(["--set", s]);
        }
        v
    }
    for dir in ["a", "b"] {
        for cmd in ["train-offline", "finetune"] {
            if call(&with_sets(&[cmd, "--seed", "4", "--out", dir], &sets)) != 0 {
                return verdict(false, format!("{cmd} failed"));
            }
        }
        let nc_dir = format!("{dir}-nc");
        if call(&with_sets(&["ablate", "--variant", "nc-8", "--from", dir, "--seed", "4", "--out", &nc_dir], &sets)) != 0 {
            return verdict(false, String::from("ablate failed"));
        }
    }
    let files = [
        "a/metrics.log",
        "a/agent.ckpt",
        "a/diffusion.ckpt",
        "a/energy.ckpt",
        "a-nc/metrics.log",
        "a-nc/agent.ckpt",
    ];
    let mut same = true;
    let mut bytes = 0;
    for f in files {
        let x = fs::read(root.join(f))?;
        let y = fs::read(root.join(f.replacen('a', "b", 1)))?;
        bytes += x.len();
        same &= !x.is_empty() && x == y;
    }
    verdict(same, format!("{} files ({bytes} bytes) byte-identical across two runs: {same}", files.len()))
}
