//! Elementwise monotone flows applied to GP samples.
//!
//! A [`FlowStack`] owns the parameters of a composition of `K` steps. Its
//! coefficients are either shared by every point or produced per point by a
//! small network of the original inputs, optionally with a Gaussian posterior
//! over the network weights. Binding a stack to a tape yields a [`BoundFlow`]
//! that warps values and reports `log|dG/df|`.

mod net;
mod step;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{AdError, Param, Tape, Tensor, Transform, Var};

pub use net::{BoundPosterior, NetShape, WeightPosterior, DEFAULT_HIDDEN, INIT_WEIGHT_LOG_SIGMA};
pub use step::{
    deriv_scalar, forward_scalar, forward_values, inverse, inverse_scalar, ResolvedStep, StepCoeffs, MAX_INVERSE_ITERS,
};

pub const DEFAULT_STEPTANH_TERMS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("invalid flow specification: {0}")]
    Spec(String),
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("flow inverse did not converge in {MAX_INVERSE_ITERS} iterations (worst residual {worst_residual:e})")]
    Convergence { worst_residual: f64 },
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Identity,
    Arcsinh,
    Steptanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub kind: FlowKind,
    /// Composition length `K`.
    pub steps: usize,
    /// Number of tanh units `J` (steptanh only).
    pub terms: usize,
    pub input_dependent: bool,
    pub bayesian: bool,
}

impl FlowSpec {
    pub fn identity() -> Self {
        FlowSpec {
            kind: FlowKind::Identity,
            steps: 1,
            terms: 0,
            input_dependent: false,
            bayesian: false,
        }
    }

    pub fn arcsinh(steps: usize) -> Self {
        FlowSpec {
            kind: FlowKind::Arcsinh,
            steps,
            terms: 0,
            input_dependent: false,
            bayesian: false,
        }
    }

    pub fn steptanh(terms: usize, steps: usize) -> Self {
        FlowSpec {
            kind: FlowKind::Steptanh,
            steps,
            terms,
            input_dependent: false,
            bayesian: false,
        }
    }

    pub fn input_dependent(mut self) -> Self {
        self.input_dependent = true;
        self
    }

    /// Input-dependent with a weight posterior.
    pub fn bayesian(mut self) -> Self {
        self.input_dependent = true;
        self.bayesian = true;
        self
    }

    pub fn is_identity(&self) -> bool {
        self.kind == FlowKind::Identity
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: &str| Err(FlowError::Spec(m.to_string()));
        if self.steps == 0 {
            return bad("composition length must be at least 1");
        }
        if self.bayesian && !self.input_dependent {
            return bad("bayesian weights require input-dependent coefficients");
        }
        match self.kind {
            FlowKind::Identity if self.steps != 1 || self.input_dependent => {
                bad("identity takes no length or modifiers")
            }
            FlowKind::Steptanh if self.terms == 0 => bad("steptanh needs at least one term"),
            _ => Ok(()),
        }
    }

    /// Raw coefficients per step for one output dimension.
    pub fn coeffs_per_step(&self) -> usize {
        match self.kind {
            FlowKind::Identity => 0,
            FlowKind::Arcsinh => 4,
            FlowKind::Steptanh => 3 * self.terms,
        }
    }

    /// Raw coefficients of one step that leave the flow close to the identity.
    pub fn init_step_raw(&self) -> Vec<f64> {
        let unit = Transform::Softplus.inverse(1.0);
        match self.kind {
            FlowKind::Identity => vec![],
            FlowKind::Arcsinh => vec![0.0, unit, 0.0, unit],
            FlowKind::Steptanh => {
                let j = self.terms;
                let small = Transform::Softplus.inverse(1e-2);
                let mut raw = vec![small; j];
                raw.extend(std::iter::repeat_n(unit, j));
                raw.extend((0..j).map(|t| {
                    if j == 1 {
                        0.0
                    } else {
                        -2.0 + 4.0 * t as f64 / (j - 1) as f64
                    }
                }));
                raw
            }
        }
    }
}

impl fmt::Display for FlowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            FlowKind::Identity => return write!(f, "identity"),
            FlowKind::Arcsinh => write!(f, "arcsinh:{}", self.steps)?,
            FlowKind::Steptanh => write!(f, "steptanh:{}:{}", self.terms, self.steps)?,
        }
        if self.bayesian {
            write!(f, "+bayes")
        } else if self.input_dependent {
            write!(f, "+id")
        } else {
            Ok(())
        }
    }
}

impl FromStr for FlowSpec {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self, FlowError> {
        let mut parts = s.trim().split('+');
        let head = parts.next().unwrap_or_default();
        let mut fields = head.split(':');
        let name = fields.next().unwrap_or_default();
        let nums = fields
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| FlowError::Spec(format!("'{v}' is not a count in '{s}'")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let too_many = || FlowError::Spec(format!("too many fields in '{s}'"));
        let mut spec = match name {
            "identity" if nums.is_empty() => FlowSpec::identity(),
            "identity" => return Err(too_many()),
            "arcsinh" => match nums[..] {
                [] => FlowSpec::arcsinh(1),
                [k] => FlowSpec::arcsinh(k),
                _ => return Err(too_many()),
            },
            "steptanh" => match nums[..] {
                [] => FlowSpec::steptanh(DEFAULT_STEPTANH_TERMS, 1),
                [j] => FlowSpec::steptanh(j, 1),
                [j, k] => FlowSpec::steptanh(j, k),
                _ => return Err(too_many()),
            },
            other => return Err(FlowError::Spec(format!("unknown flow '{other}'"))),
        };
        for m in parts {
            spec = match m {
                "id" => spec.input_dependent(),
                "bayes" => spec.bayesian(),
                other => return Err(FlowError::Spec(format!("unknown modifier '+{other}'"))),
            };
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NetWeights {
    Point(Param),
    Bayesian(WeightPosterior),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Coefficients {
    None,
    /// One `P×H` raw matrix per step.
    Shared {
        steps: Vec<Param>,
    },
    /// Network output column `(k·P + p)·H + h` feeds slot `p` of step `k`
    /// for output dimension `h`.
    Net {
        shape: NetShape,
        weights: NetWeights,
    },
}

/// The flow of one layer, shared across its `H` output dimensions with
/// separate coefficients per dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowStack {
    spec: FlowSpec,
    width: usize,
    coefficients: Coefficients,
}

impl FlowStack {
    pub fn identity(width: usize) -> Self {
        FlowStack {
            spec: FlowSpec::identity(),
            width,
            coefficients: Coefficients::None,
        }
    }

    /// Near-identity initialization. `input_dim` is the width of the inputs
    /// the coefficient network reads and is ignored otherwise.
    pub fn new(
        prefix: &str,
        spec: FlowSpec,
        width: usize,
        input_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, FlowError> {
        spec.validate()?;
        if width == 0 {
            return Err(FlowError::Spec("flow width must be positive".into()));
        }
        if spec.is_identity() {
            return Ok(FlowStack::identity(width));
        }
        let step_raw = spec.init_step_raw();
        let p = step_raw.len();
        let coefficients = if spec.input_dependent {
            let shape = NetShape {
                input: input_dim,
                hidden: DEFAULT_HIDDEN,
                output: spec.steps * p * width,
            };
            let mut bias = Vec::with_capacity(shape.output);
            for _ in 0..spec.steps {
                for &v in &step_raw {
                    bias.extend(std::iter::repeat_n(v, width));
                }
            }
            let w = shape.init_weights(&bias, rng);
            let weights = if spec.bayesian {
                NetWeights::Bayesian(WeightPosterior::new(prefix, w, INIT_WEIGHT_LOG_SIGMA))
            } else {
                NetWeights::Point(Param::from_raw(
                    format!("{prefix}.flow.weights"),
                    Transform::Identity,
                    Tensor::row_vector(w),
                ))
            };
            Coefficients::Net { shape, weights }
        } else {
            let steps = (0..spec.steps)
                .map(|k| {
                    let mut data = Vec::with_capacity(p * width);
                    for &v in &step_raw {
                        data.extend(std::iter::repeat_n(v, width));
                    }
                    Param::from_raw(
                        format!("{prefix}.flow.step{k}"),
                        Transform::Identity,
                        Tensor::from_vec(p, width, data).expect("step shape"),
                    )
                })
                .collect();
            Coefficients::Shared { steps }
        };
        Ok(FlowStack {
            spec,
            width,
            coefficients,
        })
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut Coefficients {
        &mut self.coefficients
    }

    /// Number of standard normals one weight draw consumes (0 unless Bayesian).
    pub fn weight_noise_len(&self) -> usize {
        match &self.coefficients {
            Coefficients::Net {
                weights: NetWeights::Bayesian(q),
                ..
            } => q.len(),
            _ => 0,
        }
    }

    pub fn is_bayesian(&self) -> bool {
        self.weight_noise_len() > 0
    }

    pub fn params(&self) -> Vec<&Param> {
        match &self.coefficients {
            Coefficients::None => vec![],
            Coefficients::Shared { steps } => steps.iter().collect(),
            Coefficients::Net { weights, .. } => match weights {
                NetWeights::Point(w) => vec![w],
                NetWeights::Bayesian(q) => vec![&q.mean, &q.log_sigma],
            },
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.coefficients {
            Coefficients::None => vec![],
            Coefficients::Shared { steps } => steps.iter_mut().collect(),
            Coefficients::Net { weights, .. } => match weights {
                NetWeights::Point(w) => vec![w],
                NetWeights::Bayesian(q) => vec![&mut q.mean, &mut q.log_sigma],
            },
        }
    }

    /// Records the coefficients for warping a stacked `(samples·n)×H` block of
    /// values whose rows `s·n + i` belong to input row `i` of `x` (`n×D`).
    ///
    /// A Bayesian stack draws its weights from `weight_eps`: one tensor shares
    /// a single draw across all samples, `samples` tensors give each sample
    /// block its own draw. Parameters are bound in [`FlowStack::params`] order.
    pub fn bind<'t>(
        &self,
        tape: &'t Tape,
        x: &Var<'t>,
        samples: usize,
        weight_eps: &[Tensor],
    ) -> Result<BoundFlow<'t>, FlowError> {
        let rows = x.shape().rows * samples;
        let p = self.spec.coeffs_per_step();
        let h = self.width;
        let kind = self.spec.kind;
        match &self.coefficients {
            Coefficients::None => Ok(BoundFlow {
                steps: vec![],
                kl: None,
            }),
            Coefficients::Shared { steps } => {
                let mut out = Vec::with_capacity(steps.len());
                for param in steps {
                    let v = param.bind(tape);
                    let raw = (0..p)
                        .map(|slot| {
                            let r = v.slice(slot, 1, 0, h)?;
                            Ok(if h == 1 { r } else { r.tile_rows(rows) })
                        })
                        .collect::<Result<Vec<_>, AdError>>()?;
                    out.push(StepCoeffs { kind, raw });
                }
                Ok(BoundFlow { steps: out, kl: None })
            }
            Coefficients::Net { shape, weights } => {
                let (table, kl) = match weights {
                    NetWeights::Point(w) => {
                        let w = w.bind(tape);
                        (shape.forward(x, &w)?.tile_rows(samples), None)
                    }
                    NetWeights::Bayesian(q) => {
                        let q = q.bind(tape);
                        let table = match weight_eps.len() {
                            1 => shape.forward(x, &q.sample(&weight_eps[0])?)?.tile_rows(samples),
                            n if n == samples => {
                                let blocks = weight_eps
                                    .iter()
                                    .map(|e| shape.forward(x, &q.sample(e)?))
                                    .collect::<Result<Vec<_>, _>>()?;
                                Var::concat_rows(&blocks)?
                            }
                            n => {
                                return Err(FlowError::Dimension {
                                    what: "weight draws",
                                    expected: samples,
                                    got: n,
                                })
                            }
                        };
                        (table, Some(q.kl()?))
                    }
                };
                let mut out = Vec::with_capacity(self.spec.steps);
                for k in 0..self.spec.steps {
                    let raw = (0..p)
                        .map(|slot| table.slice(0, rows, (k * p + slot) * h, h))
                        .collect::<Result<Vec<_>, _>>()?;
                    out.push(StepCoeffs { kind, raw });
                }
                Ok(BoundFlow { steps: out, kl })
            }
        }
    }
}

/// A flow whose coefficients live on a tape.
#[derive(Clone, Debug)]
pub struct BoundFlow<'t> {
    pub steps: Vec<StepCoeffs<'t>>,
    /// `KL(q(W) ‖ p(W))` when the weights are Bayesian.
    pub kl: Option<Var<'t>>,
}

impl<'t> BoundFlow<'t> {
    pub fn forward(&self, f: &Var<'t>) -> Result<Var<'t>, FlowError> {
        Ok(self.forward_log_deriv(f)?.0)
    }

    /// Warped values and the accumulated `log|dG/df|` along the composition.
    pub fn forward_log_deriv(&self, f: &Var<'t>) -> Result<(Var<'t>, Var<'t>), FlowError> {
        let mut g = *f;
        let mut logd: Option<Var<'t>> = None;
        for step in &self.steps {
            let (next, ld) = step.apply(&g)?;
            g = next;
            logd = Some(match logd {
                Some(acc) => acc.add(&ld)?,
                None => ld,
            });
        }
        let logd = match logd {
            Some(v) => v,
            None => {
                let s = f.shape();
                f.tape.constant(Tensor::zeros(s.rows, s.cols))
            }
        };
        Ok((g, logd))
    }

    pub fn resolve(&self) -> Vec<ResolvedStep> {
        self.steps.iter().map(StepCoeffs::resolve).collect()
    }

    pub fn inverse(&self, g: &Tensor, tol: f64) -> Result<Tensor, FlowError> {
        inverse(g, &self.resolve(), tol)
    }
}
