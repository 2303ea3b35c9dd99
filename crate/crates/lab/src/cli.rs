//! The `stratdiff` command line.
//!
//! Exit status is 0 on success, 2 when arguments or configuration do not
//! parse and 1 when a command fails at run time. Failures are reported on
//! stderr as a single JSON object.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use stratdiff_core::envs::{EnvKind, EnvSpec, Quality};
use stratdiff_core::harness::RunConfig;

use crate::error::LabError;
use crate::run::{self, RunDir, Variant};
use crate::{config, plot};

/// Environment variable naming the root under which relative outputs land.
pub const OUT_ENV: &str = "STRATDIFF_OUT";

#[derive(Debug, Parser)]
#[command(name = "stratdiff", version, about = "Energy-guided stratified offline-to-online RL at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config file; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set agent.rho=0.75`. Repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; defaults to the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an offline dataset with a scripted policy.
    GenData {
        #[arg(long, default_value = "pointmass-sparse", value_parser = parse_env)]
        env: EnvKind,
        #[arg(long, default_value = "medium", value_parser = parse_quality)]
        quality: Quality,
        #[arg(long, default_value_t = 20_000)]
        n: usize,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "dataset.sdd")]
        out: PathBuf,
    },
    /// Train the diffusion behavior model on the dataset.
    TrainDiffusion(RunArgs),
    /// Train the energy net against the run's agent and behavior model.
    TrainEnergy(RunArgs),
    /// Offline phase: agent, behavior model and energy net.
    TrainOffline(RunArgs),
    /// Online fine-tuning from existing checkpoints.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Run directory holding the starting checkpoints.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate the run's agent.
    Eval(RunArgs),
    /// Fine-tune an ablation variant.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// full, base, no-energy, no-stratification, adv-value, nc-<n>, nc-unlimited, utd-<k>
        #[arg(long)]
        variant: Variant,
        /// Pretrained run directory; without it the offline phase runs first.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Aggregate metrics logs of several runs into curve files.
    Plot {
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_env(s: &str) -> Result<EnvKind, String> {
    EnvKind::from_name(s).ok_or_else(|| format!("unknown environment `{s}`"))
}

fn parse_quality(s: &str) -> Result<Quality, String> {
    Quality::from_name(s).ok_or_else(|| format!("unknown quality `{s}`"))
}

fn under(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_owned(),
    }
}

enum Failure {
    Usage(LabError),
    Runtime(LabError),
}

fn resolve(args: &RunArgs, root: Option<&Path>) -> Result<(RunConfig, RunDir), Failure> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut c = config::load(args.config.as_deref(), &overrides).map_err(|e| match e {
        LabError::Io { .. } => Failure::Runtime(e),
        e => Failure::Usage(e),
    })?;
    c.dataset = under(root, Path::new(&c.dataset)).to_string_lossy().into_owned();
    let dir = under(root, args.out.as_deref().unwrap_or(Path::new(&c.output_dir)));
    let dir = RunDir::create(dir).map_err(Failure::Runtime)?;
    Ok((c, dir))
}

fn execute(cmd: Command, root: Option<&Path>) -> Result<serde_json::Value, Failure> {
    let rt = Failure::Runtime;
    Ok(match cmd {
        Command::GenData { env, quality, n, gamma, seed, out } => {
            let out = under(root, &out);
            let d = run::gen_data(&EnvSpec::for_kind(env), quality, n, gamma, seed, &out).map_err(rt)?;
            json!({
                "command": "gen-data",
                "path": out.display().to_string(),
                "transitions": d.transitions.len(),
                "episodes": d.episode_starts.len(),
                "quality": quality.name(),
            })
        }
        Command::TrainDiffusion(a) => {
            let (c, dir) = resolve(&a, root)?;
            let loss = run::train_diffusion(&c, &dir).map_err(rt)?;
            json!({ "command": "train-diffusion", "output_dir": dir.root.display().to_string(), "diffusion_loss": loss })
        }
        Command::TrainEnergy(a) => {
            let (c, dir) = resolve(&a, root)?;
            let loss = run::train_energy(&c, &dir).map_err(rt)?;
            json!({ "command": "train-energy", "output_dir": dir.root.display().to_string(), "energy_loss": loss })
        }
        Command::TrainOffline(a) => {
            let (c, dir) = resolve(&a, root)?;
            run::train_offline(&c, &dir).map_err(rt)?;
            json!({ "command": "train-offline", "output_dir": dir.root.display().to_string() })
        }
        Command::Finetune { run: a, from } => {
            let (c, dir) = resolve(&a, root)?;
            let from = from.map(|f| RunDir::new(under(root, &f)));
            run::finetune(&c, &dir, from.as_ref()).map_err(rt)?;
            json!({ "command": "finetune", "output_dir": dir.root.display().to_string() })
        }
        Command::Eval(a) => {
            let (c, dir) = resolve(&a, root)?;
            let r = run::eval(&c, &dir).map_err(rt)?;
            json!({ "command": "eval", "output_dir": dir.root.display().to_string(), "result": r })
        }
        Command::Ablate { run: a, variant, from } => {
            let (c, dir) = resolve(&a, root)?;
            variant.apply(&c).validate().map_err(|e| Failure::Usage(e.into()))?;
            let from = from.map(|f| RunDir::new(under(root, &f)));
            run::ablate(&c, variant, &dir, from.as_ref()).map_err(rt)?;
            json!({ "command": "ablate", "variant": variant.to_string(), "output_dir": dir.root.display().to_string() })
        }
        Command::Plot { runs, out } => {
            let dirs: Vec<RunDir> = runs.iter().map(|r| RunDir::new(under(root, r))).collect();
            let files = plot::plot(&dirs, &under(root, &out)).map_err(|e| match e {
                LabError::Config(_) => Failure::Usage(e),
                e => Failure::Runtime(e),
            })?;
            let files: Vec<String> = files.iter().map(|f| f.display().to_string()).collect();
            json!({ "command": "plot", "files": files })
        }
    })
}

/// Parses `args` and runs the command; returns the process exit status.
/// `root` plays the role of the output-root environment variable.
pub fn run<I, T>(args: I, root: Option<&Path>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let report = |code: i32, e: &LabError| {
        let msg = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
        let _ = writeln!(std::io::stderr(), "{msg}");
        code
    };
    match execute(cli.command, root) {
        Ok(v) => {
            println!("{v}");
            0
        }
        Err(Failure::Usage(e)) => report(2, &e),
        Err(Failure::Runtime(e)) => report(1, &e),
    }
}
