//! Ring replay buffers and the ratio-mixed batch sampler.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::envs::{Dataset, Origin, Transition};
use crate::error::{check_dims, invalid, Error, Result};
use crate::math::float;

/// `floor(rho * n)`, the offline share of a batch of `n` samples.
///
/// Shared by the sampler and the stratifier so both split a batch identically.
pub fn offline_share(n: usize, rho: f64) -> usize {
    (float::floor(rho * n as f64) as usize).min(n)
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    slots: Vec<Transition>,
    next: usize,
    origin: Origin,
    dims: Option<(usize, usize)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, origin: Origin) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("replay capacity must be positive"));
        }
        Ok(Self { capacity, slots: Vec::new(), next: 0, origin, dims: None })
    }

    /// Offline buffer holding a whole dataset (capacity = dataset size).
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let mut buf = Self::new(data.transitions.len().max(1), Origin::Offline)?;
        for t in &data.transitions {
            buf.insert(t.clone())?;
        }
        Ok(buf)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn get(&self, slot: usize) -> Option<&Transition> {
        self.slots.get(slot)
    }

    /// Transitions in slot order (not insertion order once the ring wraps).
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.slots.iter()
    }

    /// Stores `transition` (re-tagged with the buffer's origin) and returns its slot.
    pub fn insert(&mut self, mut transition: Transition) -> Result<usize> {
        let dims = (transition.state.len(), transition.action.len());
        match self.dims {
            None => self.dims = Some(dims),
            Some((s, a)) => {
                check_dims("transition state", s, dims.0)?;
                check_dims("transition action", a, dims.1)?;
            }
        }
        check_dims("transition next state", dims.0, transition.next_state.len())?;
        transition.origin = self.origin;
        let slot = self.next;
        if self.slots.len() < self.capacity {
            self.slots.push(transition);
        } else {
            self.slots[slot] = transition;
        }
        self.next = (slot + 1) % self.capacity;
        Ok(slot)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.slots.len())
    }
}

/// Where a batch sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub origin: Origin,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub transitions: Vec<Transition>,
    pub provenance: Vec<Provenance>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn offline_count(&self) -> usize {
        self.provenance.iter().filter(|p| p.origin == Origin::Offline).count()
    }

    pub fn from_transitions(transitions: Vec<Transition>) -> Self {
        let provenance = transitions
            .iter()
            .enumerate()
            .map(|(slot, t)| Provenance { origin: t.origin, slot })
            .collect();
        Self { transitions, provenance }
    }
}

/// Draws `floor(rho n)` samples from `offline` and the rest from `online`,
/// uniformly with replacement, then shuffles the batch.
///
/// While the online buffer holds fewer than `n - floor(rho n)` transitions the
/// whole batch comes from the offline buffer (and vice versa when the offline
/// buffer is empty).
pub fn sample_mixed<R: Rng + ?Sized>(
    offline: &ReplayBuffer,
    online: &ReplayBuffer,
    n: usize,
    rho: f64,
    rng: &mut R,
) -> Result<Batch> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(invalid("mixing ratio must lie in [0, 1]"));
    }
    if n == 0 {
        return Err(invalid("batch size must be positive"));
    }
    if offline.is_empty() && online.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let mut n_off = offline_share(n, rho);
    if online.len() < n - n_off {
        n_off = n;
    }
    if offline.is_empty() {
        n_off = 0;
    }
    let mut picks: Vec<Provenance> = Vec::with_capacity(n);
    for _ in 0..n_off {
        picks.push(Provenance { origin: Origin::Offline, slot: offline.draw(rng) });
    }
    for _ in n_off..n {
        picks.push(Provenance { origin: Origin::Online, slot: online.draw(rng) });
    }
    picks.shuffle(rng);
    let transitions = picks
        .iter()
        .map(|p| {
            let buf = if p.origin == Origin::Offline { offline } else { online };
            buf.slots[p.slot].clone()
        })
        .collect();
    Ok(Batch { transitions, provenance: picks })
}
