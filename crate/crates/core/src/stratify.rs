//! Alignment scoring and the offline-like / online-like batch partition.

use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::envs::Origin;
use crate::error::{check_dims, invalid, Result};
use crate::math::{float, kl_alignment, median};
use crate::replay::{offline_share, Batch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratum {
    OfflineLike,
    OnlineLike,
}

/// A batch member with its alignment score; `index` points into the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub index: usize,
    pub score: f64,
    pub origin: Origin,
}

impl Scored {
    fn crossed(&self, stratum: Stratum) -> bool {
        match stratum {
            Stratum::OfflineLike => self.origin == Origin::Online,
            Stratum::OnlineLike => self.origin == Origin::Offline,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedBatch {
    pub b_off: Vec<Scored>,
    pub b_on: Vec<Scored>,
    /// Samples whose stratum differs from their buffer of origin.
    pub exchange_count: usize,
}

fn sort_key(a: &Scored, b: &Scored) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then(a.origin.cmp(&b.origin))
        .then(a.index.cmp(&b.index))
}

fn count_exchanges(b_off: &[Scored], b_on: &[Scored]) -> usize {
    b_off.iter().filter(|s| s.crossed(Stratum::OfflineLike)).count()
        + b_on.iter().filter(|s| s.crossed(Stratum::OnlineLike)).count()
}

impl StratifiedBatch {
    /// Every sample routed through the offline-like branch, in batch order.
    ///
    /// This is how the base backbones (no stratification) see a batch.
    pub fn unstratified(batch: &Batch) -> Self {
        let b_off: Vec<Scored> = batch
            .provenance
            .iter()
            .enumerate()
            .map(|(index, p)| Scored { index, score: 0.0, origin: p.origin })
            .collect();
        let exchange_count = count_exchanges(&b_off, &[]);
        Self { b_off, b_on: Vec::new(), exchange_count }
    }

    pub fn len(&self) -> usize {
        self.b_off.len() + self.b_on.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stratum of each batch index.
    pub fn strata(&self) -> Vec<Stratum> {
        let mut out = alloc::vec![Stratum::OnlineLike; self.len()];
        for s in &self.b_off {
            out[s.index] = Stratum::OfflineLike;
        }
        out
    }

    /// Scores indexed by batch position.
    pub fn scores(&self) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.len()];
        for s in self.b_off.iter().chain(&self.b_on) {
            out[s.index] = s.score;
        }
        out
    }
}

/// Score of each batch sample: the Gaussian-KL distance between its action and
/// `samples_per_state` actions drawn from `sampler` at its state (averaged).
pub fn alignment_scores<R, S>(
    batch: &Batch,
    mut sampler: S,
    sigma_kl: f64,
    samples_per_state: usize,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    S: FnMut(&[f64], &mut R) -> Result<Vec<f64>>,
{
    if samples_per_state == 0 {
        return Err(invalid("need at least one generated action per state"));
    }
    batch
        .transitions
        .iter()
        .map(|t| {
            let mut total = 0.0;
            for _ in 0..samples_per_state {
                let a_hat = sampler(&t.state, rng)?;
                total += kl_alignment(&t.action, &a_hat, sigma_kl)?;
            }
            Ok(total / samples_per_state as f64)
        })
        .collect()
}

/// Sorts the batch by ascending score and puts the first `floor(rho N)`
/// samples in the offline-like stratum.
pub fn stratify(batch: &Batch, scores: &[f64], rho: f64) -> Result<StratifiedBatch> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(invalid("stratification ratio must lie in [0, 1]"));
    }
    stratify_count(batch, scores, offline_share(batch.len(), rho))
}

/// [`stratify`] with an explicit offline-like stratum size.
pub fn stratify_count(batch: &Batch, scores: &[f64], n_off: usize) -> Result<StratifiedBatch> {
    check_dims("alignment scores", batch.len(), scores.len())?;
    if n_off > batch.len() {
        return Err(invalid("offline-like stratum larger than the batch"));
    }
    let mut all: Vec<Scored> = scores
        .iter()
        .zip(&batch.provenance)
        .enumerate()
        .map(|(index, (&score, p))| Scored { index, score, origin: p.origin })
        .collect();
    all.sort_by(sort_key);
    let b_on = all.split_off(n_off);
    let b_off = all;
    let exchange_count = count_exchanges(&b_off, &b_on);
    Ok(StratifiedBatch { b_off, b_on, exchange_count })
}

/// Caps the number of exchanged samples at `cap` (`None` = unlimited).
///
/// Crossings are reverted in pairs (one offline-origin sample leaving the
/// online-like stratum with one online-origin sample leaving the offline-like
/// stratum), least confident first, where confidence is the distance of the
/// score from the batch median. Pairing keeps both stratum sizes fixed, so
/// unmatched crossings (only possible when stratum sizes differ from the origin
/// counts) are never reverted.
pub fn constrain_exchange(strat: &StratifiedBatch, cap: Option<usize>) -> StratifiedBatch {
    let Some(cap) = cap else {
        return strat.clone();
    };
    if strat.exchange_count <= cap {
        return strat.clone();
    }
    let all_scores: Vec<f64> = strat.b_off.iter().chain(&strat.b_on).map(|s| s.score).collect();
    let med = median(&all_scores);
    let by_confidence = |a: &Scored, b: &Scored| {
        float::abs(b.score - med)
            .total_cmp(&float::abs(a.score - med))
            .then(a.index.cmp(&b.index))
    };
    let mut up: Vec<Scored> = strat.b_on.iter().filter(|s| s.crossed(Stratum::OnlineLike)).copied().collect();
    let mut down: Vec<Scored> = strat.b_off.iter().filter(|s| s.crossed(Stratum::OfflineLike)).copied().collect();
    up.sort_by(by_confidence);
    down.sort_by(by_confidence);
    let pairs = up.len().min(down.len());
    let unmatched = up.len() + down.len() - 2 * pairs;
    let keep = pairs.min(cap.saturating_sub(unmatched) / 2);
    let revert_up: Vec<usize> = up[keep..pairs].iter().map(|s| s.index).collect();
    let revert_down: Vec<usize> = down[keep..pairs].iter().map(|s| s.index).collect();

    let mut b_off: Vec<Scored> = Vec::with_capacity(strat.b_off.len());
    let mut b_on: Vec<Scored> = Vec::with_capacity(strat.b_on.len());
    for s in &strat.b_off {
        if revert_down.contains(&s.index) {
            b_on.push(*s);
        } else {
            b_off.push(*s);
        }
    }
    for s in &strat.b_on {
        if revert_up.contains(&s.index) {
            b_off.push(*s);
        } else {
            b_on.push(*s);
        }
    }
    b_off.sort_by(sort_key);
    b_on.sort_by(sort_key);
    let exchange_count = count_exchanges(&b_off, &b_on);
    StratifiedBatch { b_off, b_on, exchange_count }
}
