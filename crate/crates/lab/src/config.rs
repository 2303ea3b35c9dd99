//! TOML run configuration with dotted-key overrides.
//!
//! A config file may be partial: values missing from it come from the defaults
//! for its `env.name` and `agent.backbone`. Overrides (`agent.rho=0.75`) win over
//! the file. Unknown keys are rejected. The literal `none` clears an optional
//! key such as `agent.n_c`.

use std::fs;
use std::path::Path;

use stratdiff_core::agents::Backbone;
use stratdiff_core::envs::EnvKind;
use stratdiff_core::harness::RunConfig;
use toml::{Table, Value};

use crate::error::{LabError, Result};

pub const DEFAULT_ENV: EnvKind = EnvKind::PointmassSparse;
pub const DEFAULT_BACKBONE: Backbone = Backbone::Calql;

fn config_err(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}

fn lookup<'a>(t: &'a Table, path: &[&str]) -> Option<&'a Value> {
    let (last, parents) = path.split_last()?;
    let mut cur = t;
    for p in parents {
        cur = cur.get(*p)?.as_table()?;
    }
    cur.get(*last)
}

fn env_kind(t: &Table) -> Result<EnvKind> {
    match lookup(t, &["env", "name"]) {
        None => Ok(DEFAULT_ENV),
        Some(v) => {
            let s = v.as_str().ok_or_else(|| config_err("env.name must be a string"))?;
            EnvKind::from_name(s).ok_or_else(|| config_err(format!("unknown environment `{s}`")))
        }
    }
}

fn backbone(t: &Table) -> Result<Backbone> {
    match lookup(t, &["agent", "backbone"]) {
        None => Ok(DEFAULT_BACKBONE),
        Some(v) => match v.as_str() {
            Some("calql") => Ok(Backbone::Calql),
            Some("iql") => Ok(Backbone::Iql),
            _ => Err(config_err(format!("agent.backbone must be \"calql\" or \"iql\", got {v}"))),
        },
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `key.path=value`. The value is read as a TOML literal, falling back
/// to a bare string; `none` yields `None`.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Option<Value>)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| config_err(format!("override `{s}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override `{s}` has an empty key segment")));
    }
    let raw = raw.trim();
    if raw == "none" {
        return Ok((path, None));
    }
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.to_owned()),
    };
    Ok((path, Some(value)))
}

fn apply_override(t: &mut Table, path: &[String], value: Option<Value>) -> Result<()> {
    let (last, parents) = path.split_last().unwrap();
    let mut cur = t;
    for p in parents {
        cur = cur
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{}` is not a table", path.join("."))))?;
    }
    match value {
        Some(v) => {
            cur.insert(last.clone(), v);
        }
        None => {
            cur.remove(last);
        }
    }
    Ok(())
}

fn to_table(config: &RunConfig) -> Table {
    Table::try_from(config).expect("run config always serializes")
}

/// Resolves file text plus overrides into a validated config.
pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let mut user = match file {
        Some(text) => text.parse::<Table>().map_err(|e| config_err(e.to_string()))?,
        None => Table::new(),
    };
    for o in overrides {
        let (path, value) = parse_override(o)?;
        apply_override(&mut user, &path, value)?;
    }
    let mut table = to_table(&RunConfig::new(env_kind(&user)?, backbone(&user)?));
    merge(&mut table, user);
    let config: RunConfig = table.try_into().map_err(|e: toml::de::Error| config_err(e.message().to_owned()))?;
    config.validate()?;
    Ok(config)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| LabError::io(p, e))?),
        None => None,
    };
    resolve(text.as_deref(), overrides)
}

pub fn to_toml(config: &RunConfig) -> String {
    toml::to_string(config).expect("run config always serializes")
}

pub fn save(path: &Path, config: &RunConfig) -> Result<()> {
    fs::write(path, to_toml(config)).map_err(|e| LabError::io(path, e))
}
