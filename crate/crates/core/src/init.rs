//! Deterministic parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Shape, Tensor4};

/// The generator used for every seeded draw in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Half-width of the uniform initialization range, `sqrt(6 / fan_in)`.
pub fn uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Weights drawn from `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor4 {
    let b = uniform_bound(fan_in);
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-b..=b))
}
