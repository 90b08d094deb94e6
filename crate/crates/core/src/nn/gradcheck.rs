//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::scalar::Scalar;

/// Relative error between an analytic derivative and its finite-difference
/// estimate, floored so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error over `coords` between `analytic` and central
/// differences of `loss` around `point`.
///
/// `loss` must be deterministic (dropout masks frozen by the caller). The
/// point is evaluated in the loss function's own precision `U`, which may be
/// wider than the precision `T` the analytic gradient was computed in.
pub fn grad_check<T, U, F>(
    mut loss: F,
    point: &[T],
    analytic: &[T],
    delta: f64,
    coords: &[usize],
) -> Result<f64>
where
    T: Scalar,
    U: Scalar,
    F: FnMut(&[U]) -> Result<U>,
{
    if !(1e-5..=1e-3).contains(&delta) {
        return Err(Error::Config(format!(
            "finite-difference step {delta} outside [1e-5, 1e-3]"
        )));
    }
    if point.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, point has {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut x: Vec<U> = point
        .iter()
        .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
        .collect();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = x[i];
        x[i] = orig + U::from_f64_lossy(delta);
        let up = loss(&x)?;
        x[i] = orig - U::from_f64_lossy(delta);
        let down = loss(&x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("grad_check loss"));
        }
        let numeric = ((up - down) / U::from_f64_lossy(2.0 * delta)).to_f64_lossy();
        worst = worst.max(relative_error(analytic[i].to_f64_lossy(), numeric));
    }
    Ok(worst)
}

/// `k` distinct coordinates out of `n`, deterministic in `seed`.
pub fn sample_coords(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, n, k.min(n)).into_vec();
    v.sort_unstable();
    v
}
