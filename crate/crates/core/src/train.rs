//! Minibatch Adam on the evidence lower bound, evaluation and timing.

use std::io::Write;
use std::time::Instant;

use cpu_time::ThreadTime;
use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{ParamSet, Tape, Tensor};
use crate::data::{NormStats, PreparedSplit};
use crate::error::{Error, Result};
use crate::model::{Mixture, Model, ModelConfig};
use crate::noise::NoiseSource;

pub const WARMUP_ITERATIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Metrics are recorded every `log_every` iterations (0: only at the ends).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 80_000,
            batch_size: 200,
            learning_rate: 1e-2,
            seed: 0,
            adam: AdamConfig::default(),
            log_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let AdamConfig { beta1, beta2, epsilon } = self.adam;
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(beta1) || !open(beta2) || !(epsilon > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {:?}", self.adam)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moment estimates for a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Adam {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One descent step on `x` along the loss gradient `g`.
    pub fn update(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        assert_eq!(x.len(), self.m.len(), "parameter count changed");
        assert_eq!(g.len(), self.m.len(), "gradient length");
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + epsilon);
        }
    }
}

/// ELBO of one batch and its gradient with respect to every raw parameter,
/// flattened in [`ParamSet::params`] order.
pub fn elbo_and_grad(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    n_total: usize,
    step: u64,
    noise: &NoiseSource,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let terms = model.elbo(&tape, x, y, n_total, step, noise)?;
    let grads = tape.backward(terms.elbo)?;
    let params = model.params();
    if tape.param_names().len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters recorded, model has {}",
            tape.param_names().len(),
            params.len()
        )));
    }
    let mut flat = Vec::with_capacity(model.num_scalars());
    for (g, p) in grads.param_grads().zip(&params) {
        match g {
            Some(g) => flat.extend_from_slice(g.as_slice()),
            None => flat.extend(std::iter::repeat_n(0.0, p.len())),
        }
    }
    Ok((terms.elbo.item(), flat))
}

/// Reshuffled-every-epoch minibatch indices. A final partial batch is
/// dropped so that every batch has the same size.
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    epochs: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: 0,
            batch: batch.clamp(1, n.max(1)),
            epochs: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Completed passes over the data.
    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epochs += 1;
        }
        let s = self.pos;
        self.pos += self.batch;
        &self.order[s..s + self.batch]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    /// Pre-update ELBO estimate.
    Updated(f64),
    /// A factorization failed; parameters were left untouched.
    Skipped,
}

/// Owns a model and its optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    adam: Adam,
    learning_rate: f64,
    noise: NoiseSource,
    step: u64,
    skipped: usize,
}

impl Trainer {
    pub fn new(model: Model, config: &TrainConfig) -> Self {
        let n = model.num_scalars();
        Trainer {
            model,
            adam: Adam::new(n, config.adam),
            learning_rate: config.learning_rate,
            noise: NoiseSource::new(config.seed),
            step: 0,
            skipped: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn train_step(&mut self, x: &Tensor, y: &Tensor, n_total: usize) -> Result<StepOutcome> {
        let step = self.step;
        self.step += 1;
        match elbo_and_grad(&self.model, x, y, n_total, step, &self.noise) {
            Ok((elbo, grad)) => {
                if !elbo.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    warn!("step {step}: non-finite ELBO or gradient, batch skipped");
                    self.skipped += 1;
                    return Ok(StepOutcome::Skipped);
                }
                let mut raw = self.model.flat_raw();
                let loss_grad: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.adam.update(&mut raw, &loss_grad, self.learning_rate);
                self.model.set_flat_raw(&raw);
                Ok(StepOutcome::Updated(elbo))
            }
            Err(e) if e.is_decomposition() => {
                warn!("step {step}: {e}; batch skipped");
                self.skipped += 1;
                Ok(StepOutcome::Skipped)
            }
            Err(e) => Err(e),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    #[serde(rename = "iter")]
    pub iteration: usize,
    #[serde(rename = "elbo")]
    pub elbo_estimate: f64,
    pub test_nll: f64,
    pub test_rmse: f64,
    #[serde(rename = "elapsed_s")]
    pub elapsed_seconds: f64,
}

pub fn write_metrics(rows: &[MetricsRow], mut out: impl Write) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean negative log predictive density in original target units.
    pub nll: f64,
    pub rmse: f64,
}

/// Test metrics in original units; `y_test` is unstandardized.
pub fn evaluate(
    model: &Model,
    x_test: &Tensor,
    y_test: &[f64],
    norm: &NormStats,
    samples: usize,
    noise: &NoiseSource,
) -> Result<Evaluation> {
    Ok(score(&model.predict(x_test, samples, noise)?, y_test, norm))
}

/// Scores a predictive mixture over standardized targets against `y_test`
/// in original units.
pub fn score(mix: &Mixture, y_test: &[f64], norm: &NormStats) -> Evaluation {
    let y_std: Vec<f64> = y_test.iter().map(|&y| norm.standardize_y(y)).collect();
    let n = y_test.len() as f64;
    let lpd = mix.log_density(&y_std);
    let nll = -lpd.iter().sum::<f64>() / n + norm.std_y.ln();
    let mse = mix
        .mean()
        .iter()
        .zip(y_test)
        .map(|(m, y)| (norm.unstandardize_y(*m) - y).powi(2))
        .sum::<f64>()
        / n;
    Evaluation { nll, rmse: mse.sqrt() }
}

/// Noise stream used for test-time prediction.
pub fn eval_noise(seed: u64) -> NoiseSource {
    NoiseSource::new(seed ^ 0x5eed_e7a1_0000_0000)
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    pub skipped: usize,
    pub epochs: usize,
}

/// Trains a freshly initialized model on `split` and records metrics at
/// iteration 0, every `log_every` iterations and at the end.
pub fn fit(model_config: &ModelConfig, config: &TrainConfig, split: &PreparedSplit) -> Result<FitOutput> {
    config.validate()?;
    let model = Model::new(model_config.clone(), &split.x_train, config.seed)?;
    fit_model(model, config, split)
}

pub fn fit_model(model: Model, config: &TrainConfig, split: &PreparedSplit) -> Result<FitOutput> {
    config.validate()?;
    let n = split.n_train();
    let mut batcher = Batcher::new(n, config.batch_size, config.seed);
    let mut trainer = Trainer::new(model, config);
    let eval_noise = eval_noise(config.seed);
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut last_elbo = f64::NAN;
    let mut record = |trainer: &Trainer, iteration: usize, elbo: f64| -> Result<()> {
        let e = if split.y_test.is_empty() {
            Evaluation {
                nll: f64::NAN,
                rmse: f64::NAN,
            }
        } else {
            evaluate(
                &trainer.model,
                &split.x_test,
                &split.y_test,
                &split.norm,
                trainer.model.config.test_samples,
                &eval_noise,
            )?
        };
        let row = MetricsRow {
            iteration,
            elbo_estimate: elbo,
            test_nll: e.nll,
            test_rmse: e.rmse,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        };
        debug!("{row:?}");
        metrics.push(row);
        Ok(())
    };

    if config.iterations == 0 {
        let idx = batcher.next_batch().to_vec();
        let (elbo, _) = elbo_and_grad(
            &trainer.model,
            &split.x_train.select_rows(&idx),
            &split.y_train.select_rows(&idx),
            n,
            0,
            &trainer.noise,
        )?;
        record(&trainer, 0, elbo)?;
    }
    for it in 0..config.iterations {
        let idx = batcher.next_batch().to_vec();
        let xb = split.x_train.select_rows(&idx);
        let yb = split.y_train.select_rows(&idx);
        if let StepOutcome::Updated(e) = trainer.train_step(&xb, &yb, n)? {
            last_elbo = e;
        }
        if it == 0 || (config.log_every > 0 && (it + 1) % config.log_every == 0) || it + 1 == config.iterations {
            let iteration = if it == 0 { 0 } else { it + 1 };
            record(&trainer, iteration, last_elbo)?;
        }
    }
    Ok(FitOutput {
        skipped: trainer.skipped(),
        epochs: batcher.epochs(),
        model: trainer.model,
        metrics,
    })
}

/// CPU seconds spent by the calling thread on `n_iter` training steps after
/// [`WARMUP_ITERATIONS`] untimed ones.
pub fn time_iterations(
    model_config: &ModelConfig,
    config: &TrainConfig,
    split: &PreparedSplit,
    n_iter: usize,
) -> Result<f64> {
    config.validate()?;
    let model = Model::new(model_config.clone(), &split.x_train, config.seed)?;
    let n = split.n_train();
    let mut batcher = Batcher::new(n, config.batch_size, config.seed);
    let mut trainer = Trainer::new(model, config);
    let batches: Vec<(Tensor, Tensor)> = (0..WARMUP_ITERATIONS + n_iter)
        .map(|_| {
            let idx = batcher.next_batch().to_vec();
            (split.x_train.select_rows(&idx), split.y_train.select_rows(&idx))
        })
        .collect();
    let (warm, timed) = batches.split_at(WARMUP_ITERATIONS);
    for (x, y) in warm {
        trainer.train_step(x, y, n)?;
    }
    let start = ThreadTime::now();
    for (x, y) in timed {
        trainer.train_step(x, y, n)?;
    }
    Ok(start.elapsed().as_secs_f64())
}
