//! Aggregation of metrics logs across runs into curve files and a summary.
//!
//! Each curve file `<metric>.tsv` has columns `phase step mean std n`, one row
//! per (phase, step) seen in any run, where `std` is the population standard
//! deviation over the `n` runs reporting the metric. `summary.tsv` lists the
//! final normalized score of every run followed by their mean and std.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use stratdiff_core::harness::{MetricsRecord, Phase};

use crate::error::{LabError, Result};
use crate::metrics;
use crate::run::RunDir;

type Getter = fn(&MetricsRecord) -> Option<f64>;

pub const METRICS: [(&str, Getter); 12] = [
    ("eval_return_mean", |r| Some(r.eval_return_mean)),
    ("eval_return_std", |r| Some(r.eval_return_std)),
    ("normalized_score", |r| Some(r.normalized_score)),
    ("critic_loss", |r| r.critic_loss),
    ("value_loss", |r| r.value_loss),
    ("policy_loss", |r| r.policy_loss),
    ("diffusion_loss", |r| r.diffusion_loss),
    ("energy_loss", |r| r.energy_loss),
    ("temperature", |r| r.temperature),
    ("exchange_count", |r| r.exchange_count.map(|c| c as f64)),
    ("exchange_count_max", |r| r.exchange_count_max.map(|c| c as f64)),
    ("exchange_count_mean", |r| r.exchange_count_mean),
];

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn phase_key(p: Phase) -> u8 {
    match p {
        Phase::Offline => 0,
        Phase::Online => 1,
    }
}

fn phase_name(k: u8) -> &'static str {
    if k == 0 {
        "offline"
    } else {
        "online"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub phase: &'static str,
    pub step: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn curve(runs: &[Vec<MetricsRecord>], get: Getter) -> Vec<CurveRow> {
    let mut points: BTreeMap<(u8, usize), Vec<f64>> = BTreeMap::new();
    for run in runs {
        for r in run {
            if let Some(v) = get(r) {
                points.entry((phase_key(r.phase), r.step)).or_default().push(v);
            }
        }
    }
    points
        .into_iter()
        .map(|((p, step), xs)| {
            let (mean, std) = mean_std(&xs);
            CurveRow { phase: phase_name(p), step, mean, std, n: xs.len() }
        })
        .collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// Reads `metrics.log` from every run and writes the curve files and summary
/// into `out`. Returns the files written.
pub fn plot(runs: &[RunDir], out: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(LabError::Config("plot needs at least one run directory".into()));
    }
    let logs = runs.iter().map(|d| metrics::read(&d.metrics())).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let mut written = Vec::new();
    for (name, get) in METRICS {
        let rows = curve(&logs, get);
        if rows.is_empty() {
            continue;
        }
        let mut text = String::from("phase\tstep\tmean\tstd\tn\n");
        for r in rows {
            writeln!(text, "{}\t{}\t{}\t{}\t{}", r.phase, r.step, r.mean, r.std, r.n).unwrap();
        }
        let p = out.join(format!("{name}.tsv"));
        write(&p, &text)?;
        written.push(p);
    }
    let mut text = String::from("run\tfinal_normalized_score\n");
    let mut finals = Vec::new();
    for (d, log) in runs.iter().zip(&logs) {
        let last = log
            .last()
            .ok_or_else(|| LabError::format(d.metrics(), "metrics log is empty"))?;
        finals.push(last.normalized_score);
        writeln!(text, "{}\t{}", d.root.display(), last.normalized_score).unwrap();
    }
    let (mean, std) = mean_std(&finals);
    writeln!(text, "mean\t{mean}\nstd\t{std}").unwrap();
    let p = out.join("summary.tsv");
    write(&p, &text)?;
    written.push(p);
    Ok(written)
}
