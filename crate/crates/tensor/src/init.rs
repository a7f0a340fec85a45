use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{numel, Tensor};

/// Seeded initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `[low, high)`.
    Uniform { low: f64, high: f64 },
    /// Zero-mean normal with the given standard deviation.
    Normal { std: f64 },
}

impl Tensor {
    /// Deterministic draw: identical `(shape, init, seed)` gives identical bits.
    pub fn seeded(shape: &[usize], init: Init, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = numel(shape);
        let data = match init {
            Init::Uniform { low, high } => (0..n).map(|_| low + (high - low) * rng.random::<f64>()).collect(),
            Init::Normal { std } => (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    if std == 0.0 {
                        0.0
                    } else {
                        z * std
                    }
                })
                .collect(),
        };
        Tensor::raw(data, shape.to_vec())
    }
}
