//! An independent doubly stochastic deep GP bound written directly against
//! nalgebra, used as an oracle for models whose flows are all the identity.

#![allow(dead_code)]

use std::f64::consts::PI;

use dtgp::ad::Tensor;
use dtgp::kernels::MeanFn;
use dtgp::layer::LayerState;
use dtgp::{Model, NoiseSource};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Tensor {
    let mut t = Tensor::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            t.set(i, j, m[(i, j)]);
        }
    }
    t
}

pub fn random_tensor(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct OracleLayer {
    z: DMatrix<f64>,
    q_mean: DMatrix<f64>,
    q_sqrt: Vec<DMatrix<f64>>,
    variance: f64,
    lengthscales: Vec<f64>,
    mean_w: Option<(DMatrix<f64>, DVector<f64>)>,
    d_out: usize,
}

impl OracleLayer {
    fn from_state(l: &LayerState) -> Self {
        let mean_w = match &l.mean {
            MeanFn::Zero { .. } => None,
            MeanFn::Linear { weights, bias } => {
                let b = bias.value();
                Some((to_na(&weights.value()), DVector::from_column_slice(b.as_slice())))
            }
        };
        OracleLayer {
            z: to_na(l.inducing.raw()),
            q_mean: to_na(l.q_mean.raw()),
            q_sqrt: l.q_sqrt.iter().map(|s| to_na(s.raw()).lower_triangle()).collect(),
            variance: l.kernel.log_variance.value().item(),
            lengthscales: l.kernel.log_lengthscales.value().as_slice().to_vec(),
            mean_w,
            d_out: l.d_out(),
        }
    }

    fn k(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
            let r2: f64 = (0..a.ncols())
                .map(|d| ((a[(i, d)] - b[(j, d)]) / self.lengthscales[d]).powi(2))
                .sum();
            self.variance * (-0.5 * r2).exp()
        })
    }

    fn mean(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.mean_w {
            None => DMatrix::zeros(x.nrows(), self.d_out),
            Some((w, b)) => {
                let mut out = x * w;
                for mut row in out.row_iter_mut() {
                    row += b.transpose();
                }
                out
            }
        }
    }

    /// Cholesky of `K(Z,Z) + c·mean(diag)·I` with `c` escalating tenfold
    /// from 1e-6 to 1e-2.
    fn kzz_chol(&self) -> DMatrix<f64> {
        let kzz = self.k(&self.z, &self.z);
        let m = kzz.nrows();
        let mean_diag = kzz.diagonal().sum() / m as f64;
        let mut c = 1e-6;
        while c <= 1e-2 * (1.0 + 1e-9) {
            let a = &kzz + DMatrix::identity(m, m) * (c * mean_diag);
            if let Some(ch) = Cholesky::new(a) {
                return ch.l();
            }
            c *= 10.0;
        }
        panic!("oracle factorization failed");
    }

    /// Marginal means and variances `(n×D, n×D)` of `q(f(x))`.
    fn marginals(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let lz = self.kzz_chol();
        let kzx = self.k(&self.z, x);
        let a = lz.solve_lower_triangular(&kzx).expect("nonsingular factor");
        let alpha = lz.transpose().solve_upper_triangular(&a).expect("nonsingular factor");
        let delta = &self.q_mean - self.mean(&self.z);
        let mu = self.mean(x) + alpha.transpose() * delta;
        let n = x.nrows();
        let covs: Vec<DMatrix<f64>> = self.q_sqrt.iter().map(|l| l * l.transpose()).collect();
        let mut var = DMatrix::zeros(n, self.d_out);
        for i in 0..n {
            let kxx = self.variance;
            let kq = (kzx.column(i).transpose() * alpha.column(i))[(0, 0)];
            for d in 0..self.d_out {
                let ks = (alpha.column(i).transpose() * &covs[d] * alpha.column(i))[(0, 0)];
                var[(i, d)] = (kxx - kq + ks).max(1e-8);
            }
        }
        (mu, var)
    }

    fn kl(&self) -> f64 {
        let lz = self.kzz_chol();
        let linv = lz
            .solve_lower_triangular(&DMatrix::identity(lz.nrows(), lz.nrows()))
            .expect("nonsingular factor");
        let kinv = linv.transpose() * &linv;
        let logdet_k = 2.0 * lz.diagonal().map(f64::ln).sum();
        let m = self.z.nrows() as f64;
        let delta = &self.q_mean - self.mean(&self.z);
        (0..self.d_out)
            .map(|d| {
                let s = &self.q_sqrt[d] * self.q_sqrt[d].transpose();
                let logdet_s = self.q_sqrt[d].diagonal().map(|v| (v * v).ln()).sum();
                let dd = delta.column(d);
                0.5 * ((&kinv * &s).trace() + (dd.transpose() * &kinv * dd)[(0, 0)] - m + logdet_k - logdet_s)
            })
            .sum()
    }
}

fn tile(a: &DMatrix<f64>, s: usize) -> DMatrix<f64> {
    let b = a.nrows();
    DMatrix::from_fn(b * s, a.ncols(), |r, c| a[(r % b, c)])
}

/// `(N/B)·ELL − Σ KL` for a model with identity flows, drawing hidden-layer
/// samples from `noise` exactly as the documented sample layout prescribes.
pub fn dgp_elbo(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    n_total: usize,
    samples: usize,
    step: u64,
    noise: &NoiseSource,
) -> f64 {
    let layers: Vec<OracleLayer> = model.layers.iter().map(OracleLayer::from_state).collect();
    let b = x.rows();
    let mut h = to_na(x);
    let mut first = true;
    let mut out = None;
    for (l, layer) in layers.iter().enumerate() {
        let (mu, var) = layer.marginals(&h);
        let (mu, var) = if first {
            (tile(&mu, samples), tile(&var, samples))
        } else {
            (mu, var)
        };
        first = false;
        if l + 1 == layers.len() {
            out = Some((mu, var));
            break;
        }
        let eps = to_na(&noise.layer(step, l, samples * b, layer.d_out));
        h = mu + var.map(f64::sqrt).component_mul(&eps);
    }
    let (mu, var) = out.unwrap();
    let s2 = model.noise_variance();
    let y = to_na(y);
    let mut ell = 0.0;
    for r in 0..samples * b {
        ell += -0.5 * (2.0 * PI * s2).ln() - ((y[(r % b, 0)] - mu[(r, 0)]).powi(2) + var[(r, 0)]) / (2.0 * s2);
    }
    ell /= samples as f64;
    let kl: f64 = layers.iter().map(OracleLayer::kl).sum();
    n_total as f64 / b as f64 * ell - kl
}

/// Draws of the latent output at a single input under the variational
/// posterior, sampling every layer including the last.
pub fn generative_draws(model: &Model, x: &Tensor, draws: usize, seed: u64) -> Vec<f64> {
    let layers: Vec<OracleLayer> = model.layers.iter().map(OracleLayer::from_state).collect();
    let mut r = rng(seed);
    let mut h = tile(&to_na(x), draws);
    for layer in &layers {
        let (mu, var) = layer.marginals(&h);
        let eps = DMatrix::from_fn(mu.nrows(), mu.ncols(), |_, _| {
            r.sample::<f64, _>(rand_distr::StandardNormal)
        });
        h = mu + var.map(f64::sqrt).component_mul(&eps);
    }
    h.column(0).iter().copied().collect()
}

/// Replaces every variational parameter with a random value so tests do not
/// rely on the structure of the initialization.
pub fn perturb(model: &mut Model, seed: u64) {
    let mut r = rng(seed);
    fn jiggle(t: &Tensor, w: f64, r: &mut impl Rng) -> Tensor {
        let mut out = t.clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v += r.random_range(-w..w));
        out
    }
    for layer in &mut model.layers {
        let (m, d) = (layer.num_inducing(), layer.d_out());
        *layer.q_mean.raw_mut() = random_tensor(m, d, -1.0, 1.0, &mut r);
        for s in &mut layer.q_sqrt {
            let mut l = random_tensor(m, m, -0.3, 0.3, &mut r);
            for i in 0..m {
                l.set(i, i, r.random_range(0.2..1.0));
            }
            *s.raw_mut() = l;
        }
        *layer.inducing.raw_mut() = jiggle(layer.inducing.raw(), 0.2, &mut r);
        *layer.kernel.log_lengthscales.raw_mut() = jiggle(layer.kernel.log_lengthscales.raw(), 0.3, &mut r);
        *layer.kernel.log_variance.raw_mut() = jiggle(&Tensor::scalar(0.0), 0.5, &mut r);
        if let MeanFn::Linear { weights, bias } = &mut layer.mean {
            *weights.raw_mut() = jiggle(weights.raw(), 0.2, &mut r);
            *bias.raw_mut() = jiggle(bias.raw(), 0.2, &mut r);
        }
    }
    *model.likelihood.log_noise.raw_mut() = Tensor::scalar(r.random_range(-3.0..-1.0));
}
