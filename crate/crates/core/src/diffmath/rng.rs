use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::Tensor;

/// Seeded counter-based generator used for every random draw.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
}

pub fn uniform_tensor(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    if bound == 0.0 {
        return Tensor::zeros(rows, cols);
    }
    let dist = Uniform::new(-bound, bound).expect("bound must be positive");
    Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
}
