//! Coefficient network for input-dependent flows and the Gaussian posterior
//! over its weights.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ad::{AdError, Param, Tape, Tensor, Transform, Var};

use super::FlowError;

/// Hidden width of the coefficient network.
pub const DEFAULT_HIDDEN: usize = 25;
/// Initial posterior std of every weight.
pub const INIT_WEIGHT_LOG_SIGMA: f64 = -3.0;

/// Layout of a one-hidden-layer tanh network `tanh(x·W1 + b1)·W2 + b2`,
/// packed as `[W1, b1, W2, b2]` in row-major order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl NetShape {
    pub fn num_weights(&self) -> usize {
        let (d, h, o) = (self.input, self.hidden, self.output);
        d * h + h + h * o + o
    }

    /// Initial flat weights: random first layer, zero second-layer weights
    /// and `output_bias` as the second-layer bias, so that the network starts
    /// as the constant `output_bias`.
    pub fn init_weights(&self, output_bias: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        assert_eq!(output_bias.len(), self.output);
        let (d, h, o) = (self.input, self.hidden, self.output);
        let scale = 1.0 / (d as f64).sqrt();
        let mut w = Vec::with_capacity(self.num_weights());
        w.extend((0..d * h).map(|_| scale * rng.sample::<f64, _>(StandardNormal)));
        w.extend(std::iter::repeat_n(0.0, h + h * o));
        w.extend_from_slice(output_bias);
        w
    }

    /// Network output `n×output` for inputs `x: n×input` and flat weights
    /// `w: 1×num_weights`.
    pub fn forward<'t>(&self, x: &Var<'t>, w: &Var<'t>) -> Result<Var<'t>, FlowError> {
        let (d, h, o) = (self.input, self.hidden, self.output);
        if x.shape().cols != d {
            return Err(FlowError::Dimension {
                what: "coefficient network input",
                expected: d,
                got: x.shape().cols,
            });
        }
        if w.shape().numel() != self.num_weights() {
            return Err(FlowError::Dimension {
                what: "coefficient network weights",
                expected: self.num_weights(),
                got: w.shape().numel(),
            });
        }
        let n = x.shape().rows;
        let w = w.reshape(1, self.num_weights())?;
        let mut off = 0;
        let mut take = |rows: usize, cols: usize| -> Result<Var<'t>, AdError> {
            let v = w.slice(0, 1, off, rows * cols)?.reshape(rows, cols);
            off += rows * cols;
            v
        };
        let w1 = take(d, h)?;
        let b1 = take(1, h)?;
        let w2 = take(h, o)?;
        let b2 = take(1, o)?;
        let hidden = x.matmul(&w1)?.add(&b1.tile_rows(n))?.tanh();
        Ok(hidden.matmul(&w2)?.add(&b2.tile_rows(n))?)
    }
}

/// Diagonal Gaussian `q(W)` with a standard normal prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightPosterior {
    pub mean: Param,
    pub log_sigma: Param,
}

impl WeightPosterior {
    pub fn new(prefix: &str, mean: Vec<f64>, log_sigma: f64) -> Self {
        let n = mean.len();
        WeightPosterior {
            mean: Param::from_raw(
                format!("{prefix}.flow.weights.mean"),
                Transform::Identity,
                Tensor::row_vector(mean),
            ),
            log_sigma: Param::from_raw(
                format!("{prefix}.flow.weights.log_sigma"),
                Transform::Identity,
                Tensor::full(1, n, log_sigma),
            ),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundPosterior<'t> {
        BoundPosterior {
            mean: self.mean.bind(tape),
            log_sigma: self.log_sigma.bind(tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundPosterior<'t> {
    pub mean: Var<'t>,
    pub log_sigma: Var<'t>,
}

impl<'t> BoundPosterior<'t> {
    /// Reparameterized draw `mean + exp(log_sigma) ⊙ eps`.
    pub fn sample(&self, eps: &Tensor) -> Result<Var<'t>, FlowError> {
        let n = self.mean.shape().numel();
        if eps.len() != n {
            return Err(FlowError::Dimension {
                what: "weight noise",
                expected: n,
                got: eps.len(),
            });
        }
        let eps = Tensor::from_vec(1, n, eps.as_slice().to_vec())?;
        let noise = self.mean.tape.constant(eps);
        Ok(self.mean.add(&self.log_sigma.exp().mul(&noise)?)?)
    }

    /// `KL(q(W) ‖ N(0, I))`.
    pub fn kl(&self) -> Result<Var<'t>, FlowError> {
        let two_ls = self.log_sigma.scale(2.0);
        let terms = two_ls.exp().add(&self.mean.square())?.sub(&two_ls)?.add_scalar(-1.0);
        Ok(terms.sum().scale(0.5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> NetShape {
        NetShape {
            input: 2,
            hidden: 4,
            output: 3,
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let tape = Tape::new();
        let s = shape();
        let x = tape.constant(Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]).unwrap());
        let w = tape.constant(Tensor::zeros(1, s.num_weights()));
        let out = s.forward(&x, &w).unwrap().value();
        assert_eq!(out.shape().dims(), [2, 3]);
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_starts_at_output_bias() {
        let s = shape();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = s.init_weights(&[0.1, -0.2, 0.3], &mut rng);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![5.0, -1.0]]).unwrap());
        let out = s.forward(&x, &tape.constant(Tensor::row_vector(w))).unwrap();
        assert_eq!(out.value().as_slice(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn rows_are_independent() {
        let s = shape();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..s.num_weights()).map(|_| rng.random::<f64>() - 0.5).collect();
        let run = |x: Tensor| {
            let tape = Tape::new();
            let out = s
                .forward(&tape.constant(x), &tape.constant(Tensor::row_vector(w.clone())))
                .unwrap();
            (*out.value()).clone()
        };
        let a = run(Tensor::from_rows(&[vec![0.1, 0.2], vec![0.1, 0.2], vec![1.0, -1.0]]).unwrap());
        assert_eq!(a.row(0), a.row(1));
        let b = run(Tensor::from_rows(&[vec![0.1, 0.2], vec![0.1, 0.2], vec![1.5, -1.0]]).unwrap());
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn dimension_errors() {
        let s = shape();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 3));
        let w = tape.constant(Tensor::zeros(1, s.num_weights()));
        assert!(matches!(s.forward(&x, &w), Err(FlowError::Dimension { .. })));
        let x = tape.constant(Tensor::zeros(2, 2));
        let w = tape.constant(Tensor::zeros(1, 4));
        assert!(matches!(s.forward(&x, &w), Err(FlowError::Dimension { .. })));
    }

    #[test]
    fn sample_with_zero_noise_is_mean() {
        let q = WeightPosterior::new("l", vec![0.5, -1.0, 2.0], 0.3);
        let tape = Tape::new();
        let b = q.bind(&tape);
        let w = b.sample(&Tensor::zeros(1, 3)).unwrap();
        assert_eq!(w.value().as_slice(), &[0.5, -1.0, 2.0]);
        let q = WeightPosterior::new("l", vec![0.5], -800.0);
        let tape = Tape::new();
        let w = q.bind(&tape).sample(&Tensor::scalar(3.0)).unwrap();
        assert_eq!(w.item(), 0.5);
    }

    #[test]
    fn sample_mean_matches_posterior_mean() {
        let mu = vec![0.4, -1.2];
        let q = WeightPosterior::new("l", mu.clone(), (0.8f64).ln());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let tape = Tape::new();
            let eps: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let w = q.bind(&tape).sample(&Tensor::row_vector(eps)).unwrap().value();
            acc[0] += w.as_slice()[0];
            acc[1] += w.as_slice()[1];
        }
        let se = 0.8 / (n as f64).sqrt();
        for i in 0..2 {
            assert!((acc[i] / n as f64 - mu[i]).abs() < 4.0 * se);
        }
    }

    #[test]
    fn kl_hand_values() {
        let kl = |mu: Vec<f64>, ls: f64| {
            let q = WeightPosterior::new("l", mu, ls);
            let tape = Tape::new();
            q.bind(&tape).kl().unwrap().item()
        };
        assert_eq!(kl(vec![0.0; 7], 0.0), 0.0);
        assert!((kl(vec![1.0], 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_quadrature() {
        let (mu, sigma) = (0.3f64, 0.7f64);
        let q = WeightPosterior::new("l", vec![mu], sigma.ln());
        let tape = Tape::new();
        let analytic = q.bind(&tape).kl().unwrap().item();

        // ∫ q log(q/p) with Simpson's rule over ±12σ.
        let logq = |w: f64| -0.5 * ((w - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let logp = |w: f64| -0.5 * w * w - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let (a, b, n) = (mu - 12.0 * sigma, mu + 12.0 * sigma, 20_000);
        let h = (b - a) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let w = a + i as f64 * h;
            let f = logq(w).exp() * (logq(w) - logp(w));
            let c = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            s += c * f;
        }
        let numeric = s * h / 3.0;
        assert!((analytic - numeric).abs() < 1e-6, "{analytic} vs {numeric}");
    }
}
