//! Noise schedules, loss primitives and distances shared by every module.

use alloc::vec::Vec;

use crate::error::{check_dims, invalid, Result};

/// Thin wrappers over `libm` so the rest of the crate reads like `std` code.
pub mod float {
    #[inline]
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    #[inline]
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    #[inline]
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
    #[inline]
    pub fn tanh(x: f64) -> f64 {
        libm::tanh(x)
    }
    #[inline]
    pub fn sin(x: f64) -> f64 {
        libm::sin(x)
    }
    #[inline]
    pub fn cos(x: f64) -> f64 {
        libm::cos(x)
    }
    #[inline]
    pub fn abs(x: f64) -> f64 {
        libm::fabs(x)
    }
    #[inline]
    pub fn floor(x: f64) -> f64 {
        libm::floor(x)
    }
    #[inline]
    pub fn ln_1p(x: f64) -> f64 {
        libm::log1p(x)
    }
    #[inline]
    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + exp(-x))
        } else {
            let e = exp(x);
            e / (1.0 + e)
        }
    }
    /// `ln(1 + e^x)` without overflow.
    #[inline]
    pub fn softplus(x: f64) -> f64 {
        if x > 0.0 {
            x + ln_1p(exp(-x))
        } else {
            ln_1p(exp(x))
        }
    }
}

use float::{abs, sqrt};

use crate::nn::{timestep_embedding, TIME_EMBED_DIM};

/// Discrete-time variance-preserving noise schedule.
///
/// Index `t` runs over `0..steps()`; `t = 0` is the least noisy level.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    embeddings: Vec<[f64; TIME_EMBED_DIM]>,
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("schedule needs at least one timestep"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for (t, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b <= 0.999) {
                return Err(invalid(alloc::format!("beta[{t}] = {b} outside (0, 0.999]")));
            }
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let embeddings = (0..betas.len()).map(timestep_embedding).collect();
        let schedule = Self { betas, alpha_bars, embeddings };
        for t in 0..schedule.steps() {
            let a = schedule.alpha(t);
            let s = schedule.sigma(t);
            assert!(abs(a * a + s * s - 1.0) < 1e-12, "alpha^2 + sigma^2 != 1 at t={t}");
        }
        Ok(schedule)
    }

    /// Betas spaced linearly between `start` and `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one timestep"));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Discretisation of the continuous linear-beta VP process, `beta(u)` rising
    /// from 0.1 to 20 over `u in [0, 1]`. Terminal `alpha_bar` is about 4e-5 for
    /// any step count (betas are capped at 0.999 for very short chains).
    pub fn vp_linear(steps: usize) -> Result<Self> {
        const B_MIN: f64 = 0.1;
        const B_MAX: f64 = 20.0;
        if steps == 0 {
            return Err(invalid("schedule needs at least one timestep"));
        }
        let n = steps as f64;
        let betas = (0..steps)
            .map(|i| {
                let k = (2 * i + 1) as f64;
                (1.0 - float::exp(-(B_MIN / n + (B_MAX - B_MIN) * k / (2.0 * n * n)))).min(0.999)
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Cached [`timestep_embedding`] of `t`.
    pub fn embedding(&self, t: usize) -> &[f64; TIME_EMBED_DIM] {
        &self.embeddings[t]
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Signal scale `sqrt(alpha_bar_t)`.
    pub fn alpha(&self, t: usize) -> f64 {
        sqrt(self.alpha_bars[t])
    }

    /// Noise level `sqrt(1 - alpha_bar_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        sqrt(1.0 - self.alpha_bars[t])
    }

    /// Variance of the DDPM posterior `q(x_{t-1} | x_t, x_0)`; zero at `t = 0`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
        }
    }
}

/// Expectile level `tau`, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Expectile(f64);

impl Expectile {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(Self(tau))
        } else {
            Err(invalid(alloc::format!("expectile level {tau} outside (0, 1)")))
        }
    }

    pub fn tau(self) -> f64 {
        self.0
    }

    fn weight(self, u: f64) -> f64 {
        if u < 0.0 {
            1.0 - self.0
        } else {
            self.0
        }
    }
}

/// Asymmetric squared loss `|tau - 1{u < 0}| * u^2`.
pub fn expectile_loss(u: f64, tau: Expectile) -> f64 {
    tau.weight(u) * u * u
}

/// Derivative of [`expectile_loss`] in `u` (0 at the kink).
pub fn expectile_loss_grad(u: f64, tau: Expectile) -> f64 {
    2.0 * tau.weight(u) * u
}

/// `alpha * x0 + sigma * eps`, componentwise.
pub fn forward_noise_with(x0: &[f64], eps: &[f64], alpha: f64, sigma: f64) -> Result<Vec<f64>> {
    check_dims("forward_noise eps", x0.len(), eps.len())?;
    Ok(x0.iter().zip(eps).map(|(x, e)| alpha * x + sigma * e).collect())
}

/// Noises a clean action to level `t` of `schedule`.
pub fn forward_noise(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    if t >= schedule.steps() {
        return Err(invalid(alloc::format!("timestep {t} >= {}", schedule.steps())));
    }
    forward_noise_with(x0, eps, schedule.alpha(t), schedule.sigma(t))
}

/// KL divergence between `N(a, s^2 I)` and `N(a_hat, s^2 I)`: `|a - a_hat|^2 / (2 s^2)`.
pub fn kl_alignment(a: &[f64], a_hat: &[f64], sigma_kl: f64) -> Result<f64> {
    check_dims("kl_alignment", a.len(), a_hat.len())?;
    if !(sigma_kl > 0.0) {
        return Err(invalid("sigma_kl must be positive"));
    }
    let sq: f64 = a.iter().zip(a_hat).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq / (2.0 * sigma_kl * sigma_kl))
}

/// Max-shifted log-softmax.
pub fn log_softmax(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite value in softmax input"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + float::ln(values.iter().map(|v| float::exp(v - max)).sum::<f64>());
    Ok(values.iter().map(|v| v - lse).collect())
}

/// `e^{v_i} / sum_j e^{v_j}`, computed with max subtraction.
pub fn self_normalized_weights(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(invalid("self-normalized weights need at least two values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite value in self-normalized weights"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| float::exp(v - max)).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, sqrt(var))
}
