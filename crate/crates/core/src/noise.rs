//! Counter-based standard normal noise.
//!
//! Every draw is a pure function of `(seed, step, layer, stream, index)`, so
//! re-evaluating an objective with perturbed parameters sees the same noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ad::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSource {
    seed: u64,
}

#[derive(Clone, Copy, Debug)]
enum Stream {
    Layer,
    Weights(usize),
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn rng(&self, step: u64, layer: usize, stream: Stream) -> ChaCha8Rng {
        let tag = match stream {
            Stream::Layer => 0,
            Stream::Weights(draw) => 1 + draw as u64,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed));
        rng.set_stream(mix(mix(step) ^ mix((layer as u64) << 32 | tag)));
        rng
    }

    fn fill(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Noise for sampling a layer: `rows×cols`, row `s·B + b` for sample `s`
    /// of point `b`.
    pub fn layer(&self, step: u64, layer: usize, rows: usize, cols: usize) -> Tensor {
        let mut rng = self.rng(step, layer, Stream::Layer);
        Tensor::from_vec(rows, cols, Self::fill(&mut rng, rows * cols)).expect("noise shape")
    }

    /// Noise for weight draw `draw` of a layer's Bayesian flow, `1×len`.
    pub fn weights(&self, step: u64, layer: usize, draw: usize, len: usize) -> Tensor {
        let mut rng = self.rng(step, layer, Stream::Weights(draw));
        Tensor::row_vector(Self::fill(&mut rng, len))
    }
}
