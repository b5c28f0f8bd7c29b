use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ModelRng;

pub const DEFAULT_BOOTSTRAP_SAMPLES: usize = 10_000;

/// Two-sided paired bootstrap test of `mean(a - b) != 0`.
///
/// Pairs are resampled with replacement `n_samples` times. The p-value is
/// twice the (add-one smoothed) fraction of resampled mean differences that
/// are zero or of the opposite sign to the observed one, capped at 1. With a
/// zero observed difference every resample counts, giving p = 1.
pub fn bootstrap_test(a: &[f64], b: &[f64], n_samples: usize, rng: &mut ModelRng) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} paired values", a.len(), b.len())));
    }
    if a.is_empty() || n_samples == 0 {
        return Err(Error::EmptyInput);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let observed = diffs.iter().sum::<f64>() / n as f64;
    let mut contradicting = 0usize;
    for _ in 0..n_samples {
        let mean = (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64;
        let counts = if observed > 0.0 {
            mean <= 0.0
        } else if observed < 0.0 {
            mean >= 0.0
        } else {
            true
        };
        contradicting += counts as usize;
    }
    Ok((2.0 * (contradicting + 1) as f64 / (n_samples + 1) as f64).min(1.0))
}
