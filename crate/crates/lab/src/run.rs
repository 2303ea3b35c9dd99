//! Run directories and the pipelines behind each CLI verb.
//!
//! A run directory holds `agent.ckpt`, `diffusion.ckpt`, `energy.ckpt`,
//! `config.toml` (the resolved config) and `metrics.log`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use stratdiff_core::envs::{generate_dataset, Dataset, EnvSpec, Quality};
use stratdiff_core::harness::{Lab, MetricsRecord, RunConfig};

use crate::error::{LabError, Result};
use crate::{checkpoint, config, dataset, metrics::MetricsLog};

pub const AGENT_CKPT: &str = "agent.ckpt";
pub const DIFFUSION_CKPT: &str = "diffusion.ckpt";
pub const ENERGY_CKPT: &str = "energy.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.log";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let d = Self::new(root);
        fs::create_dir_all(&d.root).map_err(|e| LabError::io(&d.root, e))?;
        Ok(d)
    }

    pub fn agent(&self) -> PathBuf {
        self.root.join(AGENT_CKPT)
    }

    pub fn diffusion(&self) -> PathBuf {
        self.root.join(DIFFUSION_CKPT)
    }

    pub fn energy(&self) -> PathBuf {
        self.root.join(ENERGY_CKPT)
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    /// Writes the config with `output_dir` pointing at this directory.
    pub fn snapshot(&self, config: &RunConfig) -> Result<RunConfig> {
        let mut c = config.clone();
        c.output_dir = self.root.to_string_lossy().into_owned();
        config::save(&self.config(), &c)?;
        Ok(c)
    }

    pub fn save_all(&self, lab: &Lab) -> Result<()> {
        let b = lab.bundle();
        checkpoint::save(&self.agent(), &b.agent)?;
        checkpoint::save(&self.diffusion(), &b.diffusion)?;
        checkpoint::save(&self.energy(), &b.energy)
    }

    pub fn load_all(&self, lab: &mut Lab) -> Result<()> {
        lab.load_agent(&checkpoint::load(&self.agent())?)?;
        lab.load_behavior(&checkpoint::load(&self.diffusion())?)?;
        lab.load_energy(&checkpoint::load(&self.energy())?)?;
        Ok(())
    }
}

pub fn gen_data(env: &EnvSpec, quality: Quality, n: usize, gamma: f64, seed: u64, out: &Path) -> Result<Dataset> {
    let data = generate_dataset(env, quality, n, gamma, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
    }
    dataset::save(out, &data)?;
    Ok(data)
}

pub fn open_lab(config: &RunConfig) -> Result<Lab> {
    let data = dataset::load(Path::new(&config.dataset))?;
    Ok(Lab::new(config.clone(), &data)?)
}

type Sink<'a> = &'a mut dyn FnMut(&MetricsRecord) -> stratdiff_core::Result<()>;

/// Runs `body` with a sink writing to `log`; a failed write is reported as such.
fn logged<F>(log: &mut MetricsLog, body: F) -> Result<()>
where
    F: FnOnce(Sink) -> stratdiff_core::Result<()>,
{
    let mut failure = None;
    let outcome = body(&mut |r: &MetricsRecord| {
        log.write(r).map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            stratdiff_core::Error::InvalidInput(msg)
        })
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(outcome?),
    }
}

/// Offline pretraining of agent, behavior model and energy net from scratch.
pub fn train_offline(config: &RunConfig, dir: &RunDir) -> Result<Lab> {
    let mut lab = open_lab(config)?;
    dir.snapshot(config)?;
    let mut log = MetricsLog::create(&dir.metrics())?;
    logged(&mut log, |mut sink| lab.offline_pretrain(&mut sink))?;
    dir.save_all(&lab)?;
    Ok(lab)
}

/// Behavior-model training alone; returns the mean loss.
pub fn train_diffusion(config: &RunConfig, dir: &RunDir) -> Result<Option<f64>> {
    let mut lab = open_lab(config)?;
    dir.snapshot(config)?;
    let loss = lab.pretrain_behavior()?;
    checkpoint::save(&dir.diffusion(), &lab.bundle().diffusion)?;
    Ok(loss)
}

/// Energy training against an existing agent and behavior model in `dir`.
pub fn train_energy(config: &RunConfig, dir: &RunDir) -> Result<Option<f64>> {
    let mut lab = open_lab(config)?;
    lab.load_agent(&checkpoint::load(&dir.agent())?)?;
    lab.load_behavior(&checkpoint::load(&dir.diffusion())?)?;
    dir.snapshot(config)?;
    let loss = lab.pretrain_energy()?;
    checkpoint::save(&dir.energy(), &lab.bundle().energy)?;
    Ok(loss)
}

/// Online fine-tuning from the checkpoints in `from` (or `dir` itself).
/// Metrics are appended when fine-tuning in place and start fresh otherwise.
pub fn finetune(config: &RunConfig, dir: &RunDir, from: Option<&RunDir>) -> Result<Lab> {
    let mut lab = open_lab(config)?;
    let source = from.unwrap_or(dir);
    source.load_all(&mut lab)?;
    dir.snapshot(config)?;
    let mut log = match from {
        Some(f) if f != dir => MetricsLog::create(&dir.metrics())?,
        _ => MetricsLog::append(&dir.metrics())?,
    };
    logged(&mut log, |mut sink| lab.finetune(&mut sink))?;
    dir.save_all(&lab)?;
    Ok(lab)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub normalized_score: f64,
}

pub fn eval(config: &RunConfig, dir: &RunDir) -> Result<EvalReport> {
    let mut lab = open_lab(config)?;
    lab.load_agent(&checkpoint::load(&dir.agent())?)?;
    let (mean, std) = lab.evaluate()?;
    Ok(EvalReport { eval_return_mean: mean, eval_return_std: std, normalized_score: lab.references().normalize(mean) })
}

/// Named configuration changes for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Plain mixed-batch fine-tuning of the backbone.
    Base,
    NoEnergy,
    NoStratification,
    /// Signed-residual value loss on online-like samples.
    AdvValue,
    ExchangeCap(Option<usize>),
    Utd(usize),
}

impl Variant {
    pub fn apply(self, config: &RunConfig) -> RunConfig {
        let mut c = config.clone();
        let a = &mut c.agent;
        match self {
            Variant::Full => {}
            Variant::Base => {
                a.use_stratification = false;
                a.use_energy_guidance = false;
            }
            Variant::NoEnergy => a.use_energy_guidance = false,
            Variant::NoStratification => a.use_stratification = false,
            Variant::AdvValue => a.use_expectile_online = false,
            Variant::ExchangeCap(n) => a.n_c = n,
            Variant::Utd(k) => a.utd = k,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::Base => f.write_str("base"),
            Variant::NoEnergy => f.write_str("no-energy"),
            Variant::NoStratification => f.write_str("no-stratification"),
            Variant::AdvValue => f.write_str("adv-value"),
            Variant::ExchangeCap(None) => f.write_str("nc-unlimited"),
            Variant::ExchangeCap(Some(n)) => write!(f, "nc-{n}"),
            Variant::Utd(k) => write!(f, "utd-{k}"),
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bad = || {
            format!(
                "unknown variant `{s}`; expected full, base, no-energy, no-stratification, adv-value, \
                 nc-<n>, nc-unlimited or utd-<k>"
            )
        };
        Ok(match s {
            "full" => Variant::Full,
            "base" => Variant::Base,
            "no-energy" => Variant::NoEnergy,
            "no-stratification" => Variant::NoStratification,
            "adv-value" => Variant::AdvValue,
            "nc-unlimited" => Variant::ExchangeCap(None),
            _ => {
                if let Some(n) = s.strip_prefix("nc-") {
                    Variant::ExchangeCap(Some(n.parse().map_err(|_| bad())?))
                } else if let Some(k) = s.strip_prefix("utd-") {
                    match k.parse() {
                        Ok(k) if k > 0 => Variant::Utd(k),
                        _ => return Err(bad()),
                    }
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

/// Fine-tunes `variant` of `config` into `dir`, from pretrained checkpoints in
/// `from` or after a fresh offline phase in `dir`.
pub fn ablate(config: &RunConfig, variant: Variant, dir: &RunDir, from: Option<&RunDir>) -> Result<Lab> {
    let c = variant.apply(config);
    c.validate()?;
    if from.is_none() {
        train_offline(&c, dir)?;
    }
    finetune(&c, dir, from)
}
