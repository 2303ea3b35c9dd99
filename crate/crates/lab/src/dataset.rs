//! Dataset file.
//!
//! Layout (little endian): `SDDS`, version `u32`, the environment spec (name,
//! horizon, goal, step size, reward scale and bias, reset noise, goal radius),
//! quality tag, `state_dim u32`, `action_dim u32`, `gamma f64`, transition count
//! `u64`; then fixed-width records `state, action, reward, next_state, flags u8,
//! return_to_go` where flag bit 0 is `done` and bit 1 is `terminal`; then the
//! episode-start index block (`u64` count and entries) and a CRC-32 trailer.

use std::fs;
use std::path::Path;

use stratdiff_core::envs::{Dataset, EnvKind, EnvSpec, Origin, Quality, Transition};

use crate::codec::{Reader, Writer};
use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 4] = b"SDDS";
pub const VERSION: u32 = 1;

const DONE: u8 = 1;
const TERMINAL: u8 = 2;

/// Header fields, readable without decoding the records.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub env: EnvSpec,
    pub quality: Quality,
    pub state_dim: usize,
    pub action_dim: usize,
    pub gamma: f64,
    pub transitions: usize,
}

pub fn encode(data: &Dataset) -> std::result::Result<Vec<u8>, String> {
    let sd = data.env.state_dim();
    let ad = data.env.action_dim();
    let mut w = Writer::new(MAGIC, VERSION);
    let e = &data.env;
    w.str(e.name.name());
    w.u64(e.horizon as u64);
    w.f64s(&e.goal);
    w.f64s(&[e.step_size, e.reward_scale, e.reward_bias, e.reset_noise, e.goal_radius]);
    w.str(data.quality.name());
    w.u32(sd as u32);
    w.u32(ad as u32);
    w.f64(data.gamma);
    w.u64(data.transitions.len() as u64);
    for (i, t) in data.transitions.iter().enumerate() {
        if t.state.len() != sd || t.next_state.len() != sd || t.action.len() != ad {
            return Err(format!("transition {i} does not match the environment dimensions"));
        }
        w.f64s(&t.state);
        w.f64s(&t.action);
        w.f64(t.reward);
        w.f64s(&t.next_state);
        w.u8(if t.done { DONE } else { 0 } | if t.terminal { TERMINAL } else { 0 });
        w.f64(t.return_to_go);
    }
    w.u64(data.episode_starts.len() as u64);
    for &s in &data.episode_starts {
        w.u64(s as u64);
    }
    Ok(w.finish())
}

fn read_header(r: &mut Reader) -> std::result::Result<Header, String> {
    let name = r.str()?;
    let kind = EnvKind::from_name(&name).ok_or_else(|| format!("unknown environment `{name}`"))?;
    let horizon = r.u64()? as usize;
    let goal = [r.f64()?, r.f64()?];
    let v = r.f64s(5)?;
    let env = EnvSpec {
        name: kind,
        horizon,
        goal,
        step_size: v[0],
        reward_scale: v[1],
        reward_bias: v[2],
        reset_noise: v[3],
        goal_radius: v[4],
    };
    let q = r.str()?;
    let quality = Quality::from_name(&q).ok_or_else(|| format!("unknown quality `{q}`"))?;
    let state_dim = r.u32()? as usize;
    let action_dim = r.u32()? as usize;
    if state_dim != env.state_dim() || action_dim != env.action_dim() {
        return Err(format!(
            "dimensions {state_dim}/{action_dim} do not match {} ({}/{})",
            name,
            env.state_dim(),
            env.action_dim()
        ));
    }
    let gamma = r.f64()?;
    let transitions = r.count(0)?;
    Ok(Header { env, quality, state_dim, action_dim, gamma, transitions })
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Dataset, String> {
    let mut r = Reader::open(bytes, MAGIC, VERSION)?;
    let h = read_header(&mut r)?;
    let (sd, ad) = (h.state_dim, h.action_dim);
    let record = 8 * (2 * sd + ad + 2) + 1;
    if h.transitions.saturating_mul(record) > bytes.len() {
        return Err(format!("{} transitions exceed the file size", h.transitions));
    }
    let mut transitions = Vec::with_capacity(h.transitions);
    for i in 0..h.transitions {
        let state = r.f64s(sd)?;
        let action = r.f64s(ad)?;
        let reward = r.f64()?;
        let next_state = r.f64s(sd)?;
        let flags = r.u8()?;
        if flags & !(DONE | TERMINAL) != 0 {
            return Err(format!("transition {i} has unknown flag bits {flags:#04x}"));
        }
        let return_to_go = r.f64()?;
        transitions.push(Transition {
            state,
            action,
            reward,
            next_state,
            done: flags & DONE != 0,
            terminal: flags & TERMINAL != 0,
            return_to_go,
            origin: Origin::Offline,
        });
    }
    let n = r.count(8)?;
    let mut episode_starts = Vec::with_capacity(n);
    for _ in 0..n {
        let s = r.u64()? as usize;
        if s >= transitions.len() || episode_starts.last().is_some_and(|&p| s <= p) {
            return Err(format!("episode start {s} is out of order or range"));
        }
        episode_starts.push(s);
    }
    r.end()?;
    Ok(Dataset { env: h.env, quality: h.quality, gamma: h.gamma, transitions, episode_starts })
}

/// Parses only the header; the checksum still covers the whole file.
pub fn decode_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    let mut r = Reader::open(bytes, MAGIC, VERSION)?;
    read_header(&mut r)
}

pub fn save(path: &Path, data: &Dataset) -> Result<()> {
    let bytes = encode(data).map_err(|reason| LabError::format(path, reason))?;
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes).map_err(|reason| LabError::format(path, reason))
}

pub fn load_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode_header(&bytes).map_err(|reason| LabError::format(path, reason))
}
