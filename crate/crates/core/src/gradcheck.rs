//! Central finite-difference oracles for checking analytic gradients.
//!
//! These only ever evaluate the forward function, so they stay independent
//! of the backward code they are used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Default step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor so that entries which are zero in both gradients do
/// not produce 0/0.
pub const REL_FLOOR: f64 = 1e-7;

/// Numerical gradient of `f` with respect to every element of `point`.
pub fn central_diff(point: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let indices: Vec<usize> = (0..point.len()).collect();
    central_diff_at(point, &indices, step, &mut f)
        .into_iter()
        .fold(Tensor::zeros(point.shape()), |mut acc, (i, g)| {
            acc.data_mut()[i] = g;
            acc
        })
}

/// Numerical partial derivatives at selected flat indices.
pub fn central_diff_at(
    point: &Tensor,
    indices: &[usize],
    step: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Vec<(usize, f64)> {
    let mut probe = point.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - step;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (i, (plus - minus) / (2.0 * step))
        })
        .collect()
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Uniform values in `[-scale, scale)`, deterministic per seed.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_polynomial_gradient() {
        let p = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
        let g = central_diff(&p, DEFAULT_STEP, |t| {
            let d = t.data();
            d[0].powi(3) + d[0] * d[1]
        });
        let exact = Tensor::new(vec![2], vec![3.0 * 1.5 * 1.5 - 2.0, 1.5]).unwrap();
        assert!(max_rel_error(&exact, &g) < 1e-9);
    }
}
