use stratdiff_core::agents::Backbone;
use stratdiff_core::envs::{generate_dataset, Dataset, EnvKind, Origin, Quality};
use stratdiff_core::harness::{Lab, MetricsRecord, Phase, RunConfig};

fn tiny(kind: EnvKind, backbone: Backbone, seed: u64) -> (RunConfig, Dataset) {
    let mut c = RunConfig::new(kind, backbone);
    c.agent.hidden_dims = vec![16, 16];
    c.agent.max_q_samples = 3;
    c.diffusion.hidden_dims = vec![16, 16];
    c.diffusion.timesteps = 8;
    c.diffusion.train_steps = 30;
    c.diffusion.batch_size = 16;
    c.energy.hidden_dims = vec![16, 16];
    c.energy.support_size = 4;
    c.energy.train_steps = 10;
    c.energy.batch_size = 8;
    c.offline_steps = 30;
    c.online_steps = 80;
    c.batch_size = 16;
    c.eval_every = 40;
    c.eval_episodes = 2;
    c.reference_episodes = 4;
    c.seed = seed;
    let data = generate_dataset(&c.env, Quality::Medium, 600, c.agent.gamma, seed).unwrap();
    (c, data)
}

fn run(c: &RunConfig, data: &Dataset) -> (Vec<MetricsRecord>, Lab) {
    let mut lab = Lab::new(c.clone(), data).unwrap();
    let mut recs = Vec::new();
    lab.offline_pretrain(&mut |r: &MetricsRecord| {
        recs.push(r.clone());
        Ok(())
    })
    .unwrap();
    lab.finetune(&mut |r: &MetricsRecord| {
        recs.push(r.clone());
        Ok(())
    })
    .unwrap();
    (recs, lab)
}

#[test]
fn both_backbones_run_end_to_end() {
    for backbone in [Backbone::Calql, Backbone::Iql] {
        for kind in [EnvKind::PointmassSparse, EnvKind::PointmassDense] {
            let (c, data) = tiny(kind, backbone, 1);
            let (recs, lab) = run(&c, &data);
            assert!(recs.iter().all(|r| r.eval_return_mean.is_finite() && r.normalized_score.is_finite()));
            let online: Vec<_> = recs.iter().filter(|r| r.phase == Phase::Online).collect();
            assert_eq!(online.iter().map(|r| r.step).collect::<Vec<_>>(), [0, 40, 80]);
            for r in online.iter().skip(1) {
                assert!(r.critic_loss.unwrap().is_finite());
                assert!(r.energy_loss.is_some());
                assert!(r.exchange_count_max.unwrap() <= c.batch_size);
            }
            assert_eq!(backbone == Backbone::Iql, online[1].value_loss.is_some());
            assert_eq!(backbone == Backbone::Calql, online[1].temperature.is_some());
            assert_eq!(lab.online_buffer().len(), c.online_steps);
            assert!(lab.online_buffer().iter().all(|t| t.origin == Origin::Online && t.return_to_go == 0.0));
        }
    }
}

#[test]
fn exchange_mean_matches_log() {
    let (c, data) = tiny(EnvKind::PointmassSparse, Backbone::Calql, 2);
    let (recs, lab) = run(&c, &data);
    let log = lab.exchange_log();
    assert_eq!(log.len(), c.online_steps);
    let mean = log.iter().sum::<usize>() as f64 / log.len() as f64;
    assert_eq!(recs.last().unwrap().exchange_count_mean, Some(mean));
    assert_eq!(recs.last().unwrap().exchange_count, log.last().copied());
}

#[test]
fn seeds_change_runs_and_reruns_do_not() {
    let (c, data) = tiny(EnvKind::PointmassDense, Backbone::Iql, 3);
    let (a, lab_a) = run(&c, &data);
    let (b, lab_b) = run(&c, &data);
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    assert_eq!(lab_a.bundle(), lab_b.bundle());
    let mut other = c.clone();
    other.seed = 4;
    let (_, lab_c) = run(&other, &data);
    assert_ne!(lab_a.bundle(), lab_c.bundle());
}

#[test]
fn pretrained_lab_resumes_from_tensors() {
    let (c, data) = tiny(EnvKind::PointmassSparse, Backbone::Calql, 5);
    let mut lab = Lab::new(c.clone(), &data).unwrap();
    lab.offline_pretrain(&mut |_: &MetricsRecord| Ok(())).unwrap();
    let bundle = lab.bundle();
    let restore = || {
        let mut r = Lab::new(c.clone(), &data).unwrap();
        r.load_agent(&bundle.agent).unwrap();
        r.load_behavior(&bundle.diffusion).unwrap();
        r.load_energy(&bundle.energy).unwrap();
        r
    };
    let (mut x, mut y) = (restore(), restore());
    assert_eq!(x.bundle(), bundle);
    assert_eq!(x.evaluate().unwrap(), lab.evaluate().unwrap());

    let mut a = Vec::new();
    let mut b = Vec::new();
    x.finetune(&mut |r: &MetricsRecord| {
        a.push(r.clone());
        Ok(())
    })
    .unwrap();
    y.finetune(&mut |r: &MetricsRecord| {
        b.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    assert_eq!(x.bundle(), y.bundle());
}

#[test]
fn ablation_flags_change_only_what_they_touch() {
    let (c, data) = tiny(EnvKind::PointmassSparse, Backbone::Iql, 6);
    let mut pre = Lab::new(c.clone(), &data).unwrap();
    pre.offline_pretrain(&mut |_: &MetricsRecord| Ok(())).unwrap();

    let mut no_energy = c.clone();
    no_energy.agent.use_energy_guidance = false;
    let mut lab = pre.clone();
    lab.set_config(no_energy).unwrap();
    let mut recs = Vec::new();
    lab.finetune(&mut |r: &MetricsRecord| {
        recs.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert!(recs.iter().all(|r| r.energy_loss.is_none()));
    assert_eq!(lab.energy().steps_taken(), pre.energy().steps_taken());
    assert_eq!(lab.exchange_log().len(), c.online_steps);

    let mut utd = c.clone();
    utd.agent.utd = 2;
    let mut lab = pre.clone();
    lab.set_config(utd).unwrap();
    lab.finetune(&mut |_: &MetricsRecord| Ok(())).unwrap();
    assert_eq!(lab.exchange_log().len(), 2 * c.online_steps);
    assert_eq!(lab.energy().steps_taken(), pre.energy().steps_taken() + c.online_steps as u64);
}
