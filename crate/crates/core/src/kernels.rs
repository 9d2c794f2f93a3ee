//! Covariance and mean functions of a layer's GP prior.
//!
//! Only the squared-exponential kernel with one lengthscale per input
//! dimension is provided. Another stationary kernel would implement the same
//! pair `matrix`/`diag` on bound parameters.

use serde::{Deserialize, Serialize};

use crate::ad::{AdError, Param, Tape, Tensor, Transform, Var};

/// Lengthscale used before training (inputs are standardized).
pub const INIT_LENGTHSCALE: f64 = 2.0;
pub const INIT_VARIANCE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfArd {
    /// `1×1`, exp-transformed signal variance σ_f².
    pub log_variance: Param,
    /// `1×D`, exp-transformed lengthscales ℓ_d.
    pub log_lengthscales: Param,
}

impl RbfArd {
    pub fn new(prefix: &str, dim: usize, variance: f64, lengthscale: f64) -> Self {
        RbfArd {
            log_variance: Param::from_value(
                format!("{prefix}.kernel.variance"),
                Transform::Exp,
                &Tensor::scalar(variance),
            ),
            log_lengthscales: Param::from_value(
                format!("{prefix}.kernel.lengthscales"),
                Transform::Exp,
                &Tensor::full(1, dim, lengthscale),
            ),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundRbf<'t> {
        BoundRbf {
            variance: self.log_variance.bind(tape),
            lengthscales: self.log_lengthscales.bind(tape),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.log_variance, &self.log_lengthscales]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.log_variance, &mut self.log_lengthscales]
    }
}

/// Kernel parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundRbf<'t> {
    pub variance: Var<'t>,
    pub lengthscales: Var<'t>,
}

impl<'t> BoundRbf<'t> {
    fn scaled(&self, x: &Var<'t>) -> Result<Var<'t>, AdError> {
        let d = self.lengthscales.shape().cols;
        let s = x.shape();
        if s.cols != d {
            return Err(AdError::Shape {
                op: "kernel_matrix",
                detail: format!("inputs have {} columns, kernel has {d} lengthscales", s.cols),
            });
        }
        x.div(&self.lengthscales.tile_rows(s.rows))
    }

    /// `σ_f² · exp(−½ Σ_d (x1_id − x2_jd)² / ℓ_d²)`, shape `n×m`.
    pub fn matrix(&self, x1: &Var<'t>, x2: &Var<'t>) -> Result<Var<'t>, AdError> {
        let a = self.scaled(x1)?;
        let b = self.scaled(x2)?;
        a.sq_dist(&b)?.scale(-0.5).exp().mul(&self.variance)
    }

    /// `k(x_i, x_i) = σ_f²` for every row, shape `n×1`.
    pub fn diag(&self, x: &Var<'t>) -> Result<Var<'t>, AdError> {
        let s = x.shape();
        if s.cols != self.lengthscales.shape().cols {
            return Err(AdError::Shape {
                op: "kernel_diag",
                detail: format!("inputs have {} columns", s.cols),
            });
        }
        Ok(self.variance.tile_rows(s.rows))
    }
}

/// Prior mean function `μ(·)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MeanFn {
    Zero {
        d_out: usize,
    },
    /// `x·A + b` with `A: D_in×D_out`, `b: 1×D_out`.
    Linear {
        weights: Param,
        bias: Param,
    },
}

impl MeanFn {
    pub fn linear(prefix: &str, weights: Tensor) -> Self {
        let d_out = weights.cols();
        MeanFn::Linear {
            weights: Param::from_raw(format!("{prefix}.mean.weights"), Transform::Identity, weights),
            bias: Param::from_raw(
                format!("{prefix}.mean.bias"),
                Transform::Identity,
                Tensor::zeros(1, d_out),
            ),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            MeanFn::Zero { d_out } => *d_out,
            MeanFn::Linear { weights, .. } => weights.raw().cols(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMean<'t> {
        match self {
            MeanFn::Zero { d_out } => BoundMean::Zero { d_out: *d_out },
            MeanFn::Linear { weights, bias } => BoundMean::Linear {
                weights: weights.bind(tape),
                bias: bias.bind(tape),
            },
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            MeanFn::Zero { .. } => vec![],
            MeanFn::Linear { weights, bias } => vec![weights, bias],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            MeanFn::Zero { .. } => vec![],
            MeanFn::Linear { weights, bias } => vec![weights, bias],
        }
    }

    /// Plain evaluation without a tape.
    pub fn apply_values(&self, x: &Tensor) -> Result<Tensor, AdError> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.bind(&tape).apply(&xv)?;
        Ok((*out.value()).clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BoundMean<'t> {
    Zero { d_out: usize },
    Linear { weights: Var<'t>, bias: Var<'t> },
}

impl<'t> BoundMean<'t> {
    pub fn apply(&self, x: &Var<'t>) -> Result<Var<'t>, AdError> {
        let s = x.shape();
        match self {
            BoundMean::Zero { d_out } => Ok(x.tape.constant(Tensor::zeros(s.rows, *d_out))),
            BoundMean::Linear { weights, bias } => {
                let w = weights.shape();
                if w.rows != s.cols {
                    return Err(AdError::Shape {
                        op: "mean_apply",
                        detail: format!("inputs {} with weights {w}", s),
                    });
                }
                x.matmul(weights)?.add(&bias.tile_rows(s.rows))
            }
        }
    }
}
