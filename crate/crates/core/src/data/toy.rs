use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::ad::Tensor;
use crate::error::{Error, Result};

/// Location of the two jumps, at `±TOY_EDGE`.
pub const TOY_EDGE: f64 = 0.67;
pub const DEFAULT_TOY_POINTS: usize = 100;
pub const DEFAULT_TOY_NOISE: f64 = 0.05;

/// Three equal plateaus on `[−2, 2]`: −1, 0 and +1.
pub fn step_level(x: f64) -> f64 {
    if x < -TOY_EDGE {
        -1.0
    } else if x < TOY_EDGE {
        0.0
    } else {
        1.0
    }
}

/// `n` points with `x ~ U[−2, 2]` and `y = step_level(x) + N(0, noise_sd²)`.
pub fn gen_toy_step(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n < 20 {
        return Err(Error::Contract(format!("toy data needs at least 20 points, got {n}")));
    }
    let noise = Normal::new(0.0, noise_sd)
        .map_err(|_| Error::Config(format!("invalid noise standard deviation {noise_sd}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..=2.0)).collect();
    let y = x.iter().map(|&v| step_level(v) + noise.sample(&mut rng)).collect();
    Ok(Dataset {
        x: Tensor::column(x),
        y,
        feature_names: Some(vec!["x".into()]),
        target_name: Some("y".into()),
    })
}
