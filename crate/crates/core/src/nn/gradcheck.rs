use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_dims, numerical, Result};
use crate::math::float;
use crate::rng;

const STEP: f64 = 1e-5;
const ABS_FLOOR: f64 = 1e-8;

/// Compares an analytic gradient with central finite differences.
///
/// `f` returns `(loss, gradient)` at the given parameters. Along `probe_count`
/// random unit directions `d`, the directional derivative `g . d` is compared to
/// `(f(p + h d) - f(p - h d)) / 2h` with `h = 1e-5`. The result is the largest
/// relative error; when both sides are below `1e-8` the absolute difference is
/// used instead.
pub fn grad_check<F, R>(mut f: F, params: &[f64], probe_count: usize, rng: &mut R) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    R: Rng + ?Sized,
{
    let (loss, grad) = f(params)?;
    if !loss.is_finite() {
        return Err(numerical("loss is not finite at the probe point"));
    }
    check_dims("gradient", params.len(), grad.len())?;
    let mut worst: f64 = 0.0;
    for _ in 0..probe_count.max(1) {
        let mut dir = rng::normal_vec(rng, params.len());
        let norm = float::sqrt(dir.iter().map(|x| x * x).sum());
        if norm == 0.0 {
            continue;
        }
        dir.iter_mut().for_each(|x| *x /= norm);
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let plus: Vec<f64> = params.iter().zip(&dir).map(|(p, d)| p + STEP * d).collect();
        let minus: Vec<f64> = params.iter().zip(&dir).map(|(p, d)| p - STEP * d).collect();
        let (lp, _) = f(&plus)?;
        let (lm, _) = f(&minus)?;
        if !(lp.is_finite() && lm.is_finite()) {
            return Err(numerical("loss is not finite at a perturbed point"));
        }
        let numeric = (lp - lm) / (2.0 * STEP);
        let scale = float::abs(analytic).max(float::abs(numeric));
        let err = if scale < ABS_FLOOR {
            float::abs(analytic - numeric)
        } else {
            float::abs(analytic - numeric) / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use alloc::vec;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = substream(1, 1);
        let err = grad_check(|w| Ok((w[0] * w[0], vec![2.0 * w[0]])), &[3.0], 4, &mut rng).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_has_zero_error() {
        let mut rng = substream(1, 1);
        let err = grad_check(|_| Ok((4.2, vec![0.0, 0.0])), &[1.0, 2.0], 4, &mut rng).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut rng = substream(1, 1);
        let err = grad_check(|w| Ok((w[0] * w[0], vec![3.0 * w[0]])), &[3.0], 2, &mut rng).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut rng = substream(1, 1);
        assert!(grad_check(|_| Ok((f64::NAN, vec![0.0])), &[1.0], 1, &mut rng).is_err());
    }
}
