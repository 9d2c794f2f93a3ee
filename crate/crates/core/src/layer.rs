//! One sparse variational GP layer with an output flow.
//!
//! The variational posterior over inducing outputs is kept in its natural
//! (non-whitened) form: `q(u_d) = N(m_d, S_d)` with `S_d = L_d·L_dᵀ` for
//! each output dimension `d`.

use serde::{Deserialize, Serialize};

use crate::ad::{linalg, AdError, Param, ParamSet, Side, Tape, Tensor, Transform, Var};
use crate::error::Result;
use crate::flows::{BoundFlow, FlowStack};
use crate::kernels::{BoundMean, BoundRbf, MeanFn, RbfArd};

/// Lower bound applied to marginal variances.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    /// `M×D_in` inducing inputs `Z`.
    pub inducing: Param,
    /// `M×D_out` variational means.
    pub q_mean: Param,
    /// Per output dimension, an `M×M` matrix whose lower triangle is the
    /// Cholesky factor of the variational covariance.
    pub q_sqrt: Vec<Param>,
    pub kernel: RbfArd,
    pub mean: MeanFn,
    pub flow: FlowStack,
}

impl LayerState {
    /// A layer with `q(u)` centred on the prior mean at `z` and covariance
    /// `sqrt_scale²·I`.
    pub fn new(
        prefix: &str,
        z: Tensor,
        kernel: RbfArd,
        mean: MeanFn,
        flow: FlowStack,
        sqrt_scale: f64,
    ) -> Result<Self> {
        let m = z.rows();
        let d_out = mean.d_out();
        if m == 0 {
            return Err(crate::Error::Config("a layer needs at least one inducing point".into()));
        }
        if kernel.input_dim() != z.cols() || flow.width() != d_out {
            return Err(crate::Error::Config(format!(
                "layer {prefix}: inducing inputs {}, kernel dim {}, mean width {d_out}, flow width {}",
                z.shape(),
                kernel.input_dim(),
                flow.width()
            )));
        }
        let q_mean = mean.apply_values(&z)?;
        let mut eye = Tensor::eye(m);
        eye.scale_assign(sqrt_scale);
        Ok(LayerState {
            inducing: Param::from_raw(format!("{prefix}.inducing"), Transform::Identity, z),
            q_mean: Param::from_raw(format!("{prefix}.q_mean"), Transform::Identity, q_mean),
            q_sqrt: (0..d_out)
                .map(|d| Param::from_raw(format!("{prefix}.q_sqrt{d}"), Transform::Identity, eye.clone()))
                .collect(),
            kernel,
            mean,
            flow,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.raw().rows()
    }

    pub fn d_in(&self) -> usize {
        self.inducing.raw().cols()
    }

    pub fn d_out(&self) -> usize {
        self.q_mean.raw().cols()
    }

    /// Sets `q(u) = p(u)`: the mean to `mean(Z)` and every square root to the
    /// jittered Cholesky factor of `K(Z,Z)` that [`LayerState::bind`] uses.
    pub fn set_posterior_to_prior(&mut self) -> Result<()> {
        let z = self.inducing.raw().clone();
        let tape = Tape::new();
        let zv = tape.constant(z.clone());
        let kzz = self.kernel.bind(&tape).matrix(&zv, &zv)?.value();
        let lz = linalg::cholesky_jittered(&kzz)?.l;
        *self.q_mean.raw_mut() = self.mean.apply_values(&z)?;
        for s in &mut self.q_sqrt {
            *s.raw_mut() = lz.clone();
        }
        Ok(())
    }

    /// Records the layer on `tape` in [`LayerState::params`] order and
    /// factorizes `K(Z,Z)`. Flow arguments are those of [`FlowStack::bind`].
    pub fn bind<'t>(
        &self,
        tape: &'t Tape,
        flow_x: &Var<'t>,
        samples: usize,
        weight_eps: &[Tensor],
    ) -> Result<BoundLayer<'t>> {
        let z = self.inducing.bind(tape);
        let q_mean = self.q_mean.bind(tape);
        let q_sqrt: Vec<Var<'t>> = self.q_sqrt.iter().map(|p| p.bind(tape).tril()).collect();
        let kernel = self.kernel.bind(tape);
        let mean = self.mean.bind(tape);
        let flow = self.flow.bind(tape, flow_x, samples, weight_eps)?;
        let kzz_chol = kernel.matrix(&z, &z)?.cholesky()?;
        let mean_z = mean.apply(&z)?;
        Ok(BoundLayer {
            z,
            q_mean,
            q_sqrt,
            kernel,
            mean,
            flow,
            kzz_chol,
            mean_z,
        })
    }
}

impl ParamSet for LayerState {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.inducing, &self.q_mean];
        v.extend(self.q_sqrt.iter());
        v.extend(self.kernel.params());
        v.extend(self.mean.params());
        v.extend(self.flow.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.inducing, &mut self.q_mean];
        v.extend(self.q_sqrt.iter_mut());
        v.extend(self.kernel.params_mut());
        v.extend(self.mean.params_mut());
        v.extend(self.flow.params_mut());
        v
    }
}

/// A layer recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundLayer<'t> {
    pub z: Var<'t>,
    pub q_mean: Var<'t>,
    /// Lower-triangular factors.
    pub q_sqrt: Vec<Var<'t>>,
    pub kernel: BoundRbf<'t>,
    pub mean: BoundMean<'t>,
    pub flow: BoundFlow<'t>,
    pub kzz_chol: Var<'t>,
    pub mean_z: Var<'t>,
}

/// Marginal moments of `q(f(x))`, both `n×D_out`.
#[derive(Clone, Copy, Debug)]
pub struct Marginals<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
}

impl<'t> BoundLayer<'t> {
    /// Pointwise marginals of the layer's GP at the rows of `x`.
    pub fn conditional(&self, x: &Var<'t>) -> Result<Marginals<'t>> {
        let kzx = self.kernel.matrix(&self.z, x)?;
        let a = self.kzz_chol.tri_solve(&kzx, Side::Lower)?;
        let alpha = self.kzz_chol.tri_solve(&a, Side::LowerTransposed)?;
        let delta = self.q_mean.sub(&self.mean_z)?;
        let mean = self.mean.apply(x)?.add(&alpha.t().matmul(&delta)?)?;

        let base = self.kernel.diag(x)?.sub(&a.square().sum_rows().t())?;
        let cols = self
            .q_sqrt
            .iter()
            .map(|l| {
                let proj = l.t().matmul(&alpha)?;
                base.add(&proj.square().sum_rows().t())
            })
            .collect::<Result<Vec<_>, AdError>>()?;
        let var = if cols.len() == 1 {
            cols[0]
        } else {
            Var::concat_cols(&cols)?
        };
        Ok(Marginals {
            mean,
            var: var.clamp_min(VAR_FLOOR),
        })
    }

    /// `Σ_d KL(q(u_d) ‖ p(u_d))`.
    pub fn kl_u(&self) -> Result<Var<'t>> {
        let lz = &self.kzz_chol;
        let m = lz.shape().rows as f64;
        let d_out = self.q_sqrt.len() as f64;
        let delta = self.q_mean.sub(&self.mean_z)?;
        let maha = lz.tri_solve(&delta, Side::Lower)?.square().sum();
        let logdet_k = lz.logdet_from_chol()?;
        let mut total = maha.add(&logdet_k.scale(d_out))?.add_scalar(-m * d_out);
        for l in &self.q_sqrt {
            let trace = lz.tri_solve(l, Side::Lower)?.square().sum();
            let logdet_s = l.diag()?.square().log()?.sum();
            total = total.add(&trace)?.sub(&logdet_s)?;
        }
        Ok(total.scale(0.5))
    }

    pub fn warp(&self, f0: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.flow.forward(f0)?)
    }
}

/// Reparameterized draw `mean + sqrt(var) ⊙ eps`.
pub fn sample_marginals<'t>(m: &Marginals<'t>, eps: &Tensor) -> Result<Var<'t>> {
    let noise = m.mean.tape.constant(eps.clone());
    Ok(m.mean.add(&m.var.sqrt()?.mul(&noise)?)?)
}
