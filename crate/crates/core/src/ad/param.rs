use serde::{Deserialize, Serialize};

use super::tape::{softplus, Tape, Var};
use super::tensor::Tensor;

/// Map from the unconstrained raw value to the value the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Identity,
    Softplus,
    Exp,
}

impl Transform {
    pub fn forward(self, raw: f64) -> f64 {
        match self {
            Transform::Identity => raw,
            Transform::Softplus => softplus(raw),
            Transform::Exp => raw.exp(),
        }
    }

    /// Raw value producing `value`. Panics for non-positive `value` when the
    /// transform is positive-valued.
    pub fn inverse(self, value: f64) -> f64 {
        match self {
            Transform::Identity => value,
            Transform::Softplus => {
                assert!(value > 0.0, "softplus inverse of {value}");
                // log(exp(v) − 1), stable for large v
                value + (-(-value).exp_m1()).ln()
            }
            Transform::Exp => {
                assert!(value > 0.0, "log of {value}");
                value.ln()
            }
        }
    }

    fn apply<'t>(self, raw: Var<'t>) -> Var<'t> {
        match self {
            Transform::Identity => raw,
            Transform::Softplus => raw.softplus(),
            Transform::Exp => raw.exp(),
        }
    }
}

/// A trainable array: unconstrained raw storage plus a positivity transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    name: String,
    transform: Transform,
    raw: Tensor,
    #[serde(skip)]
    grad: Option<Tensor>,
}

impl Param {
    pub fn from_raw(name: impl Into<String>, transform: Transform, raw: Tensor) -> Self {
        Param {
            name: name.into(),
            transform,
            raw,
            grad: None,
        }
    }

    /// Builds the raw value from a constrained one.
    pub fn from_value(name: impl Into<String>, transform: Transform, value: &Tensor) -> Self {
        Param::from_raw(name, transform, value.map(|v| transform.inverse(v)))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn transform(&self) -> Transform {
        self.transform
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut Tensor {
        &mut self.raw
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Constrained value as a plain tensor.
    pub fn value(&self) -> Tensor {
        let t = self.transform;
        self.raw.map(|r| t.forward(r))
    }

    /// Registers the raw value on `tape` and returns the constrained var.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Var<'t> {
        self.transform.apply(tape.param(self))
    }

    /// Accumulated gradient with respect to the raw value.
    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn accumulate_grad(&mut self, g: &Tensor) {
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Anything that owns an ordered list of parameters.
///
/// `params` and `params_mut` must yield the same parameters in the same order,
/// which is also the order in which the owner binds them to a tape.
pub trait ParamSet {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Concatenated raw values.
    fn flat_raw(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.raw().as_slice().iter().copied())
            .collect()
    }

    fn set_flat_raw(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.raw_mut().as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length");
    }

    /// Concatenated accumulated gradients (zeros where none).
    fn flat_grad(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in self.params() {
            match p.grad() {
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => out.extend(std::iter::repeat_n(0.0, p.len())),
            }
        }
        out
    }
}
