//! Single flow steps: tape versions for training and scalar versions for
//! inversion and plotting.

use crate::ad::{softplus, AdError, Tensor, Var};

use super::{FlowError, FlowKind};

/// Iteration cap for the numerical steptanh inverse.
pub const MAX_INVERSE_ITERS: usize = 100;

/// Raw (unconstrained) coefficients of one step, each broadcast to the shape
/// of the values being warped.
#[derive(Clone, Debug)]
pub struct StepCoeffs<'t> {
    pub kind: FlowKind,
    pub raw: Vec<Var<'t>>,
}

/// Constrained coefficients of one step as plain tensors.
#[derive(Clone, Debug)]
pub struct ResolvedStep {
    pub kind: FlowKind,
    pub coeffs: Vec<Tensor>,
}

impl<'t> StepCoeffs<'t> {
    pub fn resolve(&self) -> ResolvedStep {
        let coeffs = self
            .raw
            .iter()
            .enumerate()
            .map(|(p, v)| {
                let t = v.value();
                if positive_slot(self.kind, self.raw.len(), p) {
                    t.map(softplus)
                } else {
                    (*t).clone()
                }
            })
            .collect();
        ResolvedStep {
            kind: self.kind,
            coeffs,
        }
    }

    fn positive(&self, p: usize) -> Var<'t> {
        self.raw[p].softplus()
    }

    /// Warped values and `log|dG/df|` of this step.
    pub fn apply(&self, f: &Var<'t>) -> Result<(Var<'t>, Var<'t>), AdError> {
        match self.kind {
            FlowKind::Identity => {
                let s = f.shape();
                Ok((*f, f.tape.constant(Tensor::zeros(s.rows, s.cols))))
            }
            FlowKind::Arcsinh => {
                let (a, b, c, d) = (self.raw[0], self.positive(1), self.raw[2], self.positive(3));
                let u = f.sub(&c)?.div(&d)?;
                let g = a.add(&b.mul(&u.asinh())?)?;
                let logd = b
                    .log()?
                    .sub(&d.log()?)?
                    .sub(&u.square().add_scalar(1.0).log()?.scale(0.5))?;
                Ok((g, logd))
            }
            FlowKind::Steptanh => {
                let j = self.raw.len() / 3;
                let mut g = *f;
                let mut slope = None::<Var<'t>>;
                for t in 0..j {
                    let a = self.positive(t);
                    let b = self.positive(j + t);
                    let c = self.raw[2 * j + t];
                    let th = b.mul(&f.sub(&c)?)?.tanh();
                    g = g.add(&a.mul(&th)?)?;
                    // a·b·(1 − tanh²)
                    let term = a.mul(&b)?.mul(&th.square().neg().add_scalar(1.0))?;
                    slope = Some(match slope {
                        Some(s) => s.add(&term)?,
                        None => term,
                    });
                }
                let logd = match slope {
                    Some(s) => s.add_scalar(1.0).log()?,
                    None => {
                        let s = f.shape();
                        f.tape.constant(Tensor::zeros(s.rows, s.cols))
                    }
                };
                Ok((g, logd))
            }
        }
    }
}

/// Whether raw slot `p` passes through softplus.
pub(crate) fn positive_slot(kind: FlowKind, len: usize, p: usize) -> bool {
    match kind {
        FlowKind::Identity => false,
        FlowKind::Arcsinh => p == 1 || p == 3,
        FlowKind::Steptanh => p < 2 * (len / 3),
    }
}

/// Scalar forward map for constrained coefficients `c`.
pub fn forward_scalar(kind: FlowKind, c: &[f64], f: f64) -> f64 {
    match kind {
        FlowKind::Identity => f,
        FlowKind::Arcsinh => c[0] + c[1] * ((f - c[2]) / c[3]).asinh(),
        FlowKind::Steptanh => {
            let j = c.len() / 3;
            f + (0..j)
                .map(|t| c[t] * (c[j + t] * (f - c[2 * j + t])).tanh())
                .sum::<f64>()
        }
    }
}

pub fn deriv_scalar(kind: FlowKind, c: &[f64], f: f64) -> f64 {
    match kind {
        FlowKind::Identity => 1.0,
        FlowKind::Arcsinh => {
            let u = (f - c[2]) / c[3];
            c[1] / (c[3] * (1.0 + u * u).sqrt())
        }
        FlowKind::Steptanh => {
            let j = c.len() / 3;
            1.0 + (0..j)
                .map(|t| {
                    let th = (c[j + t] * (f - c[2 * j + t])).tanh();
                    c[t] * c[j + t] * (1.0 - th * th)
                })
                .sum::<f64>()
        }
    }
}

/// Scalar inverse. Returns the preimage and the final residual `|G(f) − g|`.
pub fn inverse_scalar(kind: FlowKind, c: &[f64], g: f64, tol: f64) -> Result<f64, f64> {
    match kind {
        FlowKind::Identity => Ok(g),
        FlowKind::Arcsinh => Ok(c[2] + c[3] * ((g - c[0]) / c[1]).sinh()),
        FlowKind::Steptanh => {
            // |G(f) − f| ≤ Σ a_j, so the root is bracketed by g ± Σ a_j.
            let j = c.len() / 3;
            let spread: f64 = c[..j].iter().sum();
            let (mut lo, mut hi) = (g - spread - tol, g + spread + tol);
            let mut f = g;
            let mut resid = f64::INFINITY;
            for _ in 0..MAX_INVERSE_ITERS {
                let r = forward_scalar(kind, c, f) - g;
                resid = r.abs();
                if resid < tol {
                    return Ok(f);
                }
                if r > 0.0 {
                    hi = f;
                } else {
                    lo = f;
                }
                let newton = f - r / deriv_scalar(kind, c, f);
                f = if newton > lo && newton < hi {
                    newton
                } else {
                    0.5 * (lo + hi)
                };
            }
            Err(resid)
        }
    }
}

/// Inverts a composition step by step in reverse order.
pub fn inverse(g: &Tensor, steps: &[ResolvedStep], tol: f64) -> Result<Tensor, FlowError> {
    if !(tol > 0.0) {
        return Err(FlowError::Spec(format!(
            "inverse tolerance must be positive, got {tol}"
        )));
    }
    let mut x = g.clone();
    let mut worst: f64 = 0.0;
    let mut failed = false;
    let mut scratch = Vec::new();
    for step in steps.iter().rev() {
        for (i, v) in x.as_mut_slice().iter_mut().enumerate() {
            coeffs_at(step, i, &mut scratch);
            match inverse_scalar(step.kind, &scratch, *v, tol) {
                Ok(f) => *v = f,
                Err(r) => {
                    failed = true;
                    worst = worst.max(r);
                }
            }
        }
    }
    if failed {
        return Err(FlowError::Convergence { worst_residual: worst });
    }
    Ok(x)
}

/// Coefficients of element `i`, broadcasting `1×1` coefficient tensors.
pub(crate) fn coeffs_at(step: &ResolvedStep, i: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend(
        step.coeffs
            .iter()
            .map(|t| if t.len() == 1 { t.as_slice()[0] } else { t.as_slice()[i] }),
    );
}

/// Plain forward pass through resolved steps.
pub fn forward_values(f: &Tensor, steps: &[ResolvedStep]) -> Tensor {
    let mut x = f.clone();
    let mut scratch = Vec::new();
    for step in steps {
        for (i, v) in x.as_mut_slice().iter_mut().enumerate() {
            coeffs_at(step, i, &mut scratch);
            *v = forward_scalar(step.kind, &scratch, *v);
        }
    }
    x
}
