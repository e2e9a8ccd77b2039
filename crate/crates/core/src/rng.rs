//! The crate's single pseudo-random source.
//!
//! Every stochastic choice (weight initialization, shuffling, mixup draws,
//! synthetic data) comes from a seeded xoshiro256++ generator, so runs are
//! bit-reproducible on a given build.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::linalg::Matrix;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Row-major draws of `N(0, std²)`.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    if std == 1.0 {
        return Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    }
    let normal = Normal::new(0.0, std).expect("standard deviation is finite and non-negative");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}
