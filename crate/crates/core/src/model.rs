//! The stacked model: propagation, the evidence lower bound, prediction and
//! prior sampling.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{linalg, Param, ParamSet, Tape, Tensor, Transform, Var};
use crate::error::{Error, Result};
use crate::flows::{forward_values, FlowSpec, FlowStack};
use crate::init::{kmeans, linear_mean_weights};
use crate::kernels::{MeanFn, RbfArd, INIT_LENGTHSCALE, INIT_VARIANCE};
use crate::layer::{sample_marginals, LayerState, Marginals};
use crate::noise::NoiseSource;

pub const DEFAULT_TRAIN_SAMPLES: usize = 1;
pub const DEFAULT_TEST_SAMPLES: usize = 100;
pub const INIT_NOISE_VARIANCE: f64 = 1e-2;
pub const INNER_SQRT_SCALE: f64 = 1e-5;
pub const OUTPUT_SQRT_SCALE: f64 = 1.0;
/// Test points per tape during prediction.
const PREDICT_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output width of every layer; the last is 1.
    pub widths: Vec<usize>,
    /// Flow of every layer; the last is the identity.
    pub flows: Vec<FlowSpec>,
    pub num_inducing: usize,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl ModelConfig {
    /// `layers` layers of width 1 with `flow` on every hidden layer.
    pub fn new(layers: usize, flow: FlowSpec, num_inducing: usize) -> Self {
        let mut flows = vec![flow; layers.saturating_sub(1)];
        flows.push(FlowSpec::identity());
        ModelConfig {
            widths: vec![1; layers],
            flows,
            num_inducing,
            train_samples: DEFAULT_TRAIN_SAMPLES,
            test_samples: DEFAULT_TEST_SAMPLES,
        }
    }

    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    /// Model label such as `2-DTGP`, or `2-DGP` when every flow is the identity.
    pub fn tag(&self) -> String {
        let kind = if self.flows.iter().all(FlowSpec::is_identity) {
            "DGP"
        } else {
            "DTGP"
        };
        format!("{}-{kind}", self.layers())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() {
            return bad("at least one layer is required".into());
        }
        if self.flows.len() != self.widths.len() {
            return bad(format!("{} flows for {} layers", self.flows.len(), self.widths.len()));
        }
        if self.widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if *self.widths.last().unwrap() != 1 {
            return bad("the output layer must have width 1".into());
        }
        if !self.flows.last().unwrap().is_identity() {
            return bad("the output layer flow must be the identity".into());
        }
        if self.num_inducing == 0 || self.train_samples == 0 || self.test_samples == 0 {
            return bad("inducing points and sample counts must be positive".into());
        }
        for f in &self.flows {
            f.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLikelihood {
    /// `1×1`, exp-transformed noise variance σ².
    pub log_noise: Param,
}

impl GaussianLikelihood {
    pub fn new(variance: f64) -> Self {
        GaussianLikelihood {
            log_noise: Param::from_value("likelihood.variance", Transform::Exp, &Tensor::scalar(variance)),
        }
    }

    pub fn variance(&self) -> f64 {
        self.log_noise.value().item()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub layers: Vec<LayerState>,
    pub likelihood: GaussianLikelihood,
}

/// How weight draws of Bayesian flows are shared across samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightDraws {
    /// One draw for the whole evaluation.
    Shared,
    /// One draw per sample block.
    PerSample,
}

/// Values recorded while propagating a batch through the layers.
#[derive(Clone, Debug)]
pub struct Trace<'t> {
    /// Warped samples of the hidden layers, `(S·B)×H` with row `s·B + b`.
    pub hidden: Vec<Var<'t>>,
    /// Output layer moments, `(S·B)×1`.
    pub output: Marginals<'t>,
    pub kl_u: Vec<Var<'t>>,
    pub kl_weights: Vec<Var<'t>>,
}

#[derive(Clone, Copy, Debug)]
pub struct ElboTerms<'t> {
    pub elbo: Var<'t>,
    pub ell: Var<'t>,
    pub kl_u: Var<'t>,
    pub kl_weights: Var<'t>,
}

impl Model {
    /// Initializes every layer from the training inputs propagated through
    /// the mean functions.
    pub fn new(config: ModelConfig, x_train: &Tensor, seed: u64) -> Result<Self> {
        config.validate()?;
        if x_train.rows() == 0 || x_train.cols() == 0 {
            return Err(Error::Config("training inputs are empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_dim = x_train.cols();
        let n_layers = config.layers();
        let mut current = x_train.clone();
        let mut layers = Vec::with_capacity(n_layers);
        for (l, (&width, flow)) in config.widths.iter().zip(&config.flows).enumerate() {
            let prefix = format!("layer{l}");
            let last = l + 1 == n_layers;
            let d_in = current.cols();
            let z = kmeans(&current, config.num_inducing, &mut rng);
            let mean = if last {
                MeanFn::Zero { d_out: width }
            } else {
                MeanFn::linear(&prefix, linear_mean_weights(&current, width))
            };
            let kernel = RbfArd::new(&prefix, d_in, INIT_VARIANCE, INIT_LENGTHSCALE);
            let flow = FlowStack::new(&prefix, *flow, width, input_dim, &mut rng)?;
            let scale = if last { OUTPUT_SQRT_SCALE } else { INNER_SQRT_SCALE };
            let next = mean.apply_values(&current)?;
            layers.push(LayerState::new(&prefix, z, kernel, mean, flow, scale)?);
            current = next;
        }
        Ok(Model {
            config,
            input_dim,
            layers,
            likelihood: GaussianLikelihood::new(INIT_NOISE_VARIANCE),
        })
    }

    pub fn noise_variance(&self) -> f64 {
        self.likelihood.variance()
    }

    fn check_inputs(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::Config(format!(
                "inputs have {} columns, model expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        if x.rows() == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        Ok(())
    }

    /// Propagates `x` (`B×D`) with `samples` samples per point. Hidden layers
    /// are sampled and warped; the output layer returns moments only. Layer
    /// parameters are recorded in [`ParamSet::params`] order.
    pub fn propagate<'t>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
        samples: usize,
        step: u64,
        noise: &NoiseSource,
        draws: WeightDraws,
    ) -> Result<Trace<'t>> {
        self.check_inputs(x)?;
        let b = x.rows();
        let xv = tape.constant(x.clone());
        let mut current = None::<Var<'t>>;
        let mut hidden = Vec::new();
        let mut kl_u = Vec::new();
        let mut kl_weights = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let wlen = layer.flow.weight_noise_len();
            let weight_eps: Vec<Tensor> = match (wlen, draws) {
                (0, _) => vec![],
                (_, WeightDraws::Shared) => vec![noise.weights(step, l, 0, wlen)],
                (_, WeightDraws::PerSample) => (0..samples).map(|s| noise.weights(step, l, s, wlen)).collect(),
            };
            let bound = layer.bind(tape, &xv, samples, &weight_eps)?;
            let marg = match current {
                // Every sample of the first layer sees the same inputs.
                None => {
                    let m = bound.conditional(&xv)?;
                    Marginals {
                        mean: m.mean.tile_rows(samples),
                        var: m.var.tile_rows(samples),
                    }
                }
                Some(h) => bound.conditional(&h)?,
            };
            kl_u.push(bound.kl_u()?);
            if let Some(k) = bound.flow.kl {
                kl_weights.push(k);
            }
            if l == last {
                return Ok(Trace {
                    hidden,
                    output: marg,
                    kl_u,
                    kl_weights,
                });
            }
            let eps = noise.layer(step, l, samples * b, layer.d_out());
            let f = bound.warp(&sample_marginals(&marg, &eps)?)?;
            hidden.push(f);
            current = Some(f);
        }
        unreachable!("models have at least one layer")
    }

    /// Doubly stochastic bound `(N/B)·ELL − Σ KL(q(u)‖p(u)) − Σ KL(q(W)‖p(W))`
    /// for the batch `(x, y)` drawn from `n_total` points. Records every
    /// parameter in [`ParamSet::params`] order.
    pub fn elbo<'t>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
        y: &Tensor,
        n_total: usize,
        step: u64,
        noise: &NoiseSource,
    ) -> Result<ElboTerms<'t>> {
        if y.rows() != x.rows() || y.cols() != 1 {
            return Err(Error::Contract(format!(
                "targets {} for inputs {}",
                y.shape(),
                x.shape()
            )));
        }
        let s = self.config.train_samples;
        let trace = self.propagate(tape, x, s, step, noise, WeightDraws::Shared)?;
        let noise_var = self.likelihood.log_noise.bind(tape);
        let ell = ell_closed_form(y, &trace.output, &noise_var, s)?;
        let sum = |v: &[Var<'t>]| -> Result<Var<'t>> {
            let mut acc = tape.scalar(0.0);
            for k in v {
                acc = acc.add(k)?;
            }
            Ok(acc)
        };
        let kl_u = sum(&trace.kl_u)?;
        let kl_weights = sum(&trace.kl_weights)?;
        let scale = n_total as f64 / x.rows() as f64;
        let elbo = ell.scale(scale).sub(&kl_u)?.sub(&kl_weights)?;
        Ok(ElboTerms {
            elbo,
            ell,
            kl_u,
            kl_weights,
        })
    }

    /// Output-layer moments for `samples` propagated samples of every row of
    /// `x`; Bayesian flows draw fresh weights for each sample.
    pub fn predict(&self, x: &Tensor, samples: usize, noise: &NoiseSource) -> Result<Mixture> {
        self.check_inputs(x)?;
        let t = x.rows();
        let mut means = Tensor::zeros(samples, t);
        let mut vars = Tensor::zeros(samples, t);
        for (chunk, start) in (0..t).step_by(PREDICT_CHUNK).enumerate() {
            let end = (start + PREDICT_CHUNK).min(t);
            let idx: Vec<usize> = (start..end).collect();
            let tape = Tape::new();
            let trace = self.propagate(
                &tape,
                &x.select_rows(&idx),
                samples,
                chunk as u64,
                noise,
                WeightDraws::PerSample,
            )?;
            let (mu, var) = (trace.output.mean.value(), trace.output.var.value());
            let b = idx.len();
            for s in 0..samples {
                for i in 0..b {
                    means.set(s, start + i, mu.get(s * b + i, 0));
                    vars.set(s, start + i, var.get(s * b + i, 0));
                }
            }
        }
        Ok(Mixture {
            means,
            vars,
            noise_var: self.noise_variance(),
        })
    }

    /// Ancestral draw of the latent output at the rows of `x` from the prior
    /// with full covariances at every layer.
    pub fn prior_sample(&self, x: &Tensor, noise: &NoiseSource, draw: u64) -> Result<Tensor> {
        self.check_inputs(x)?;
        let n = x.rows();
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut current = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let wlen = layer.flow.weight_noise_len();
            let weight_eps: Vec<Tensor> = if wlen > 0 {
                vec![noise.weights(draw, l, 0, wlen)]
            } else {
                vec![]
            };
            let bound = layer.bind(&tape, &xv, 1, &weight_eps)?;
            let cv = tape.constant(current.clone());
            let k = bound.kernel.matrix(&cv, &cv)?.value();
            let chol = linalg::cholesky_jittered(&k)?.l;
            let mean = bound.mean.apply(&cv)?.value();
            let eps = noise.layer(draw, l, n, layer.d_out());
            let mut f = chol.matmul(&eps)?;
            f.add_assign(&mean);
            current = forward_values(&f, &bound.flow.resolve());
        }
        Ok(current)
    }
}

impl ParamSet for Model {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.layers.iter().flat_map(|l| l.params()).collect();
        v.push(&self.likelihood.log_noise);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        v.push(&mut self.likelihood.log_noise);
        v
    }
}

/// `(1/S)·Σ_s Σ_b [−½ log(2πσ²) − ((y_b − μ_sb)² + v_sb) / (2σ²)]` for
/// stacked moments with row `s·B + b`.
pub fn ell_closed_form<'t>(y: &Tensor, output: &Marginals<'t>, noise_var: &Var<'t>, samples: usize) -> Result<Var<'t>> {
    let tape = output.mean.tape;
    let rows = output.mean.shape().rows;
    if rows != y.rows() * samples {
        return Err(Error::Contract(format!(
            "{rows} output rows for {} targets and {samples} samples",
            y.rows()
        )));
    }
    let yv = tape.constant(y.clone()).tile_rows(samples);
    let sq = yv.sub(&output.mean)?.square().add(&output.var)?.sum();
    let log_term = noise_var.log()?.add_scalar((2.0 * PI).ln()).scale(-0.5 * rows as f64);
    let quad = sq.div(&noise_var.scale(2.0))?;
    Ok(log_term.sub(&quad)?.scale(1.0 / samples as f64))
}

/// Equal-weight Gaussian mixture predictive, `S×T` component moments of the
/// latent output plus the likelihood variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub means: Tensor,
    pub vars: Tensor,
    pub noise_var: f64,
}

fn log_normal(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (y - mean).powi(2) / var)
}

impl Mixture {
    pub fn samples(&self) -> usize {
        self.means.rows()
    }

    pub fn points(&self) -> usize {
        self.means.cols()
    }

    fn column<'a>(&self, t: &'a Tensor, i: usize) -> impl Iterator<Item = f64> + 'a {
        let n = t.cols();
        t.as_slice()[i..].iter().step_by(n).copied()
    }

    /// Mixture mean of every point.
    pub fn mean(&self) -> Vec<f64> {
        let s = self.samples() as f64;
        (0..self.points())
            .map(|i| self.column(&self.means, i).sum::<f64>() / s)
            .collect()
    }

    /// Variance of `y` under the mixture at every point.
    pub fn variance(&self) -> Vec<f64> {
        let s = self.samples() as f64;
        self.mean()
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let second: f64 = self
                    .column(&self.means, i)
                    .zip(self.column(&self.vars, i))
                    .map(|(mu, v)| v + self.noise_var + mu * mu)
                    .sum::<f64>()
                    / s;
                (second - m * m).max(0.0)
            })
            .collect()
    }

    /// `log p(y_i)` at point `i`.
    pub fn log_density_at(&self, i: usize, y: f64) -> f64 {
        let logs: Vec<f64> = self
            .column(&self.means, i)
            .zip(self.column(&self.vars, i))
            .map(|(mu, v)| log_normal(y, mu, v + self.noise_var))
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return top;
        }
        top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln() - (logs.len() as f64).ln()
    }

    /// `log p(y_i)` for every point; `y` has one value per point.
    pub fn log_density(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.points(), "one target per point");
        y.iter().enumerate().map(|(i, &v)| self.log_density_at(i, v)).collect()
    }

    /// Mixture CDF of `y` at point `i`.
    pub fn cdf_at(&self, i: usize, y: f64) -> f64 {
        let s = self.samples() as f64;
        self.column(&self.means, i)
            .zip(self.column(&self.vars, i))
            .map(|(mu, v)| 0.5 * statrs::function::erf::erfc(-(y - mu) / (2.0 * (v + self.noise_var)).sqrt()))
            .sum::<f64>()
            / s
    }

    /// Quantile of level `p ∈ (0, 1)` at point `i` by bisection on the CDF.
    pub fn quantile_at(&self, i: usize, p: f64) -> f64 {
        let m = self.mean()[i];
        let sd = self.variance()[i].sqrt().max(1e-12);
        let (mut lo, mut hi) = (m - 20.0 * sd, m + 20.0 * sd);
        while self.cdf_at(i, lo) > p {
            lo -= 20.0 * sd;
        }
        while self.cdf_at(i, hi) < p {
            hi += 20.0 * sd;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf_at(i, mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

#[cfg(test)]
mod tests;
