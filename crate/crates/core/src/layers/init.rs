use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero-mean Gaussian weights with standard deviation `sqrt(2 / fan_in)`.
///
/// For a conv kernel `(k_h, k_w, c_in, c_out)` the fan-in is `k_h * k_w * c_in`.
pub fn he_init(shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::invalid("he_init", "fan_in must be positive"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        shape.to_vec(),
        (0..shape.iter().product::<usize>())
            .map(|_| normal.sample(&mut rng))
            .collect(),
    )
}
