//! Inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `len` rows of `dims` angles in degrees, as a smooth random walk.
pub fn random_walk(len: usize, dims: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row: Vec<f64> = (0..dims).map(|_| rng.random_range(20.0..160.0)).collect();
    (0..len)
        .map(|_| {
            for a in &mut row {
                *a = (*a + rng.random_range(-2.0..2.0)).clamp(0.0, 180.0);
            }
            row.clone()
        })
        .collect()
}
