use std::cell::RefCell;
use std::fmt::Write as _;
use std::rc::Rc;

use super::linalg;
use super::param::Param;
use super::tensor::{gemm, MatRef, Shape, Tensor};
use super::AdError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnKind {
    Neg,
    Exp,
    Log,
    Tanh,
    Asinh,
    Softplus,
    Square,
    Sqrt,
}

/// Which triangular system [`Var::tri_solve`] solves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// `l·x = b`
    Lower,
    /// `lᵀ·x = b`
    LowerTransposed,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Binary { kind: BinKind, a: usize, b: usize },
    Unary { kind: UnKind, a: usize },
    Affine { a: usize, scale: f64 },
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Sum { a: usize },
    SumRows { a: usize },
    SumCols { a: usize },
    Diag { a: usize },
    Tril { a: usize },
    ClampMin { a: usize, floor: f64 },
    SqDist { a: usize, b: usize },
    Cholesky { a: usize, coef: f64 },
    TriSolve { l: usize, b: usize, side: Side },
    LogDetChol { l: usize },
    Slice { a: usize, row0: usize, col0: usize },
    TileRows { a: usize, times: usize },
    Reshape { a: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
}

impl Op {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf".into(),
            Op::Binary { kind, a, b } => format!("{kind:?}(#{a}, #{b})").to_lowercase(),
            Op::Unary { kind, a } => format!("{kind:?}(#{a})").to_lowercase(),
            Op::Affine { a, scale } => format!("affine(#{a}, scale={scale})"),
            Op::MatMul { a, b } => format!("matmul(#{a}, #{b})"),
            Op::Transpose { a } => format!("transpose(#{a})"),
            Op::Sum { a } => format!("sum(#{a})"),
            Op::SumRows { a } => format!("sum_rows(#{a})"),
            Op::SumCols { a } => format!("sum_cols(#{a})"),
            Op::Diag { a } => format!("diag(#{a})"),
            Op::Tril { a } => format!("tril(#{a})"),
            Op::ClampMin { a, floor } => format!("clamp_min(#{a}, {floor})"),
            Op::SqDist { a, b } => format!("sq_dist(#{a}, #{b})"),
            Op::Cholesky { a, coef } => format!("cholesky(#{a}, jitter={coef})"),
            Op::TriSolve { l, b, side } => format!("tri_solve(#{l}, #{b}, {side:?})"),
            Op::LogDetChol { l } => format!("logdet_from_chol(#{l})"),
            Op::Slice { a, row0, col0 } => format!("slice(#{a}, {row0}, {col0})"),
            Op::TileRows { a, times } => format!("tile_rows(#{a}, {times})"),
            Op::Reshape { a } => format!("reshape(#{a})"),
            Op::ConcatRows { parts } => format!("concat_rows({parts:?})"),
            Op::ConcatCols { parts } => format!("concat_cols({parts:?})"),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Define-by-run computation record. Rebuilt for every objective evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(usize, String)>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that is differentiated but not tied to a [`Param`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A leaf carrying data that never needs a gradient. Gradients still flow
    /// into it; callers simply ignore them.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Registers the raw value of `p` as a leaf. Registration order is kept so
    /// gradients can be handed back to parameters in the same order.
    pub fn param(&self, p: &Param) -> Var<'_> {
        let v = self.leaf(p.raw().clone());
        self.params.borrow_mut().push((v.id, p.name().to_string()));
        v
    }

    /// Names of registered parameters, in registration order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.borrow().iter().map(|(_, n)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Plain-text listing of every recorded op.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.nodes.borrow().iter().enumerate() {
            let _ = writeln!(out, "#{i} {} -> {}", n.op.name(), n.value.shape());
        }
        out
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, AdError> {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        if !nodes[root.id].value.shape().is_scalar() {
            return Err(AdError::Contract(format!(
                "backward needs a scalar root, got {}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::scalar(1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(&nodes, node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let params = self.params.borrow().iter().map(|(id, _)| *id).collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradients of a scalar root with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when `v` does not reach the root.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let s = v.shape();
                Tensor::zeros(s.rows, s.cols)
            }
        }
    }

    /// Gradients of registered parameters in registration order (`None` when
    /// unreachable from the root).
    pub fn param_grads(&self) -> impl Iterator<Item = Option<&Tensor>> + '_ {
        self.params
            .iter()
            .map(move |&id| self.grads.get(id).and_then(Option::as_ref))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Reduces a gradient to the operand's shape (scalar broadcasting).
fn reduce_to(g: Tensor, shape: Shape) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        Tensor::scalar(g.sum())
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), AdError> {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let y = &*node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let bcast = |t: &Tensor, i: usize| -> f64 {
                if t.shape().is_scalar() {
                    t.as_slice()[0]
                } else {
                    t.as_slice()[i]
                }
            };
            let n = g.len();
            let gs = g.as_slice();
            let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                BinKind::Add => (gs.to_vec(), gs.to_vec()),
                BinKind::Sub => (gs.to_vec(), gs.iter().map(|v| -v).collect()),
                BinKind::Mul => (
                    (0..n).map(|i| gs[i] * bcast(bv, i)).collect(),
                    (0..n).map(|i| gs[i] * bcast(av, i)).collect(),
                ),
                BinKind::Div => (
                    (0..n).map(|i| gs[i] / bcast(bv, i)).collect(),
                    (0..n)
                        .map(|i| {
                            let d = bcast(bv, i);
                            -gs[i] * bcast(av, i) / (d * d)
                        })
                        .collect(),
                ),
            };
            let s = g.shape();
            let ga = Tensor::from_vec(s.rows, s.cols, ga)?;
            let gb = Tensor::from_vec(s.rows, s.cols, gb)?;
            accumulate(grads, *a, reduce_to(ga, av.shape()));
            accumulate(grads, *b, reduce_to(gb, bv.shape()));
        }
        Op::Unary { kind, a } => {
            let x = val(*a);
            let d = match kind {
                UnKind::Neg => g.map(|v| -v),
                UnKind::Exp => g.zip_map(y, |g, y| g * y),
                UnKind::Log => g.zip_map(x, |g, x| g / x),
                UnKind::Tanh => g.zip_map(y, |g, y| g * (1.0 - y * y)),
                UnKind::Asinh => g.zip_map(x, |g, x| g / (1.0 + x * x).sqrt()),
                UnKind::Softplus => g.zip_map(x, |g, x| g * sigmoid(x)),
                UnKind::Square => g.zip_map(x, |g, x| 2.0 * g * x),
                UnKind::Sqrt => g.zip_map(y, |g, y| g / (2.0 * y)),
            };
            accumulate(grads, *a, d);
        }
        Op::Affine { a, scale } => accumulate(grads, *a, g.map(|v| v * scale)),
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let mut ga = Tensor::zeros(av.rows(), av.cols());
            gemm(1.0, MatRef::normal(g), MatRef::transposed(bv), 0.0, &mut ga);
            let mut gb = Tensor::zeros(bv.rows(), bv.cols());
            gemm(1.0, MatRef::transposed(av), MatRef::normal(g), 0.0, &mut gb);
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Transpose { a } => accumulate(grads, *a, g.transpose()),
        Op::Sum { a } => {
            let s = val(*a).shape();
            accumulate(grads, *a, Tensor::full(s.rows, s.cols, g.item()));
        }
        Op::SumRows { a } => {
            // y[0, j] = Σ_i a[i, j]
            let s = val(*a).shape();
            let mut d = Tensor::zeros(s.rows, s.cols);
            for i in 0..s.rows {
                for j in 0..s.cols {
                    d.set(i, j, g.get(0, j));
                }
            }
            accumulate(grads, *a, d);
        }
        Op::SumCols { a } => {
            let s = val(*a).shape();
            let mut d = Tensor::zeros(s.rows, s.cols);
            for i in 0..s.rows {
                for j in 0..s.cols {
                    d.set(i, j, g.get(i, 0));
                }
            }
            accumulate(grads, *a, d);
        }
        Op::Diag { a } => {
            let n = val(*a).rows();
            let mut d = Tensor::zeros(n, n);
            for i in 0..n {
                d.set(i, i, g.get(i, 0));
            }
            accumulate(grads, *a, d);
        }
        Op::Tril { a } => {
            let mut d = g.clone();
            for i in 0..d.rows() {
                for j in i + 1..d.cols() {
                    d.set(i, j, 0.0);
                }
            }
            accumulate(grads, *a, d);
        }
        Op::ClampMin { a, floor } => {
            let x = val(*a);
            accumulate(grads, *a, g.zip_map(x, |g, x| if x > *floor { g } else { 0.0 }));
        }
        Op::SqDist { a, b } => {
            // y_ij = Σ_d (a_id − b_jd)²
            let (av, bv) = (val(*a), val(*b));
            let (n, m, dim) = (av.rows(), bv.rows(), av.cols());
            let mut ga = Tensor::zeros(n, dim);
            let mut gb = Tensor::zeros(m, dim);
            for i in 0..n {
                let ai = av.row(i);
                for j in 0..m {
                    let gij = 2.0 * g.get(i, j);
                    if gij == 0.0 {
                        continue;
                    }
                    let bj = bv.row(j);
                    for d in 0..dim {
                        let diff = gij * (ai[d] - bj[d]);
                        ga.as_mut_slice()[i * dim + d] += diff;
                        gb.as_mut_slice()[j * dim + d] -= diff;
                    }
                }
            }
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Cholesky { a, coef } => {
            let d = linalg::cholesky_backward(y, g, *coef)?;
            accumulate(grads, *a, d);
        }
        Op::TriSolve { l, b, side } => {
            let lv = val(*l);
            let n = lv.rows();
            let (gb, mut gl) = match side {
                Side::Lower => {
                    let gb = linalg::solve_lower_t(lv, g)?;
                    let mut gl = Tensor::zeros(n, n);
                    gemm(-1.0, MatRef::normal(&gb), MatRef::transposed(y), 0.0, &mut gl);
                    (gb, gl)
                }
                Side::LowerTransposed => {
                    let gb = linalg::solve_lower(lv, g)?;
                    let mut gl = Tensor::zeros(n, n);
                    gemm(-1.0, MatRef::normal(y), MatRef::transposed(&gb), 0.0, &mut gl);
                    (gb, gl)
                }
            };
            for i in 0..n {
                for j in i + 1..n {
                    gl.set(i, j, 0.0);
                }
            }
            accumulate(grads, *b, gb);
            accumulate(grads, *l, gl);
        }
        Op::LogDetChol { l } => {
            let lv = val(*l);
            let n = lv.rows();
            let mut d = Tensor::zeros(n, n);
            for i in 0..n {
                d.set(i, i, 2.0 * g.item() / lv.get(i, i));
            }
            accumulate(grads, *l, d);
        }
        Op::Slice { a, row0, col0 } => {
            let s = val(*a).shape();
            let mut d = Tensor::zeros(s.rows, s.cols);
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    d.set(row0 + i, col0 + j, g.get(i, j));
                }
            }
            accumulate(grads, *a, d);
        }
        Op::TileRows { a, times } => {
            let s = val(*a).shape();
            let block = s.numel();
            let mut d = vec![0.0; block];
            for t in 0..*times {
                for (di, gi) in d.iter_mut().zip(&g.as_slice()[t * block..(t + 1) * block]) {
                    *di += gi;
                }
            }
            accumulate(grads, *a, Tensor::from_vec(s.rows, s.cols, d)?);
        }
        Op::Reshape { a } => {
            let s = val(*a).shape();
            accumulate(grads, *a, Tensor::from_vec(s.rows, s.cols, g.as_slice().to_vec())?);
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let s = val(p).shape();
                let len = s.numel();
                let d = Tensor::from_vec(s.rows, s.cols, g.as_slice()[offset..offset + len].to_vec())?;
                offset += len;
                accumulate(grads, p, d);
            }
        }
        Op::ConcatCols { parts } => {
            let mut col0 = 0;
            for &p in parts {
                let s = val(p).shape();
                let mut d = Tensor::zeros(s.rows, s.cols);
                for i in 0..s.rows {
                    for j in 0..s.cols {
                        d.set(i, j, g.get(i, col0 + j));
                    }
                }
                col0 += s.cols;
                accumulate(grads, p, d);
            }
        }
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
