//! Differentiable operations on [`Var`].
//!
//! Elementwise binary ops accept equal shapes or a `1×1` operand on either
//! side; there is no other broadcasting. Row replication is explicit through
//! [`Var::tile_rows`].

use std::rc::Rc;

use super::linalg;
use super::tape::{softplus, BinKind, Op, Side, UnKind, Var};
use super::tensor::{Shape, Tensor};
use super::AdError;

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Shape {
        self.value().shape()
    }

    /// Value of a `1×1` var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary(&self, other: &Var<'t>, kind: BinKind) -> Result<Var<'t>, AdError> {
        self.check_same_tape(other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let out = if sa == sb {
            a.zip_map(&b, f)
        } else if sb.is_scalar() {
            let y = b.item();
            a.map(|x| f(x, y))
        } else if sa.is_scalar() {
            let x = a.item();
            b.map(|y| f(x, y))
        } else {
            return Err(AdError::Shape {
                op: "elementwise",
                detail: format!("{sa} with {sb}"),
            });
        };
        Ok(self.tape.push(
            out,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(other, BinKind::Mul)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(other, BinKind::Div)
    }

    fn unary(&self, kind: UnKind, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.push(out, Op::Unary { kind, a: self.id })
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(UnKind::Neg, |x| -x)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(UnKind::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Var<'t>, AdError> {
        if let Some(bad) = self.value().as_slice().iter().find(|v| !(**v > 0.0)) {
            return Err(AdError::Domain { op: "log", value: *bad });
        }
        Ok(self.unary(UnKind::Log, f64::ln))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(UnKind::Tanh, f64::tanh)
    }

    pub fn asinh(&self) -> Var<'t> {
        self.unary(UnKind::Asinh, f64::asinh)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(UnKind::Softplus, softplus)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(UnKind::Square, |x| x * x)
    }

    pub fn sqrt(&self) -> Result<Var<'t>, AdError> {
        if let Some(bad) = self.value().as_slice().iter().find(|v| **v < 0.0) {
            return Err(AdError::Domain {
                op: "sqrt",
                value: *bad,
            });
        }
        Ok(self.unary(UnKind::Sqrt, f64::sqrt))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x * c);
        self.tape.push(out, Op::Affine { a: self.id, scale: c })
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let k = self.tape.scalar(c);
        self.binary(&k, BinKind::Add).expect("scalar broadcast always succeeds")
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, AdError> {
        self.check_same_tape(other);
        let out = self.value().matmul(&other.value())?;
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn t(&self) -> Var<'t> {
        let out = self.value().transpose();
        self.tape.push(out, Op::Transpose { a: self.id })
    }

    /// Sum of every element, as `1×1`.
    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum { a: self.id })
    }

    /// Column sums: `n×m → 1×m`.
    pub fn sum_rows(&self) -> Var<'t> {
        let v = self.value();
        let mut out = Tensor::zeros(1, v.cols());
        for i in 0..v.rows() {
            for (o, x) in out.as_mut_slice().iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        self.tape.push(out, Op::SumRows { a: self.id })
    }

    /// Row sums: `n×m → n×1`.
    pub fn sum_cols(&self) -> Var<'t> {
        let v = self.value();
        let out = Tensor::column((0..v.rows()).map(|i| v.row(i).iter().sum()).collect());
        self.tape.push(out, Op::SumCols { a: self.id })
    }

    /// Diagonal of a square matrix as `n×1`.
    pub fn diag(&self) -> Result<Var<'t>, AdError> {
        let v = self.value();
        if !v.shape().is_square() {
            return Err(AdError::Shape {
                op: "diag",
                detail: format!("non-square {}", v.shape()),
            });
        }
        let out = Tensor::column((0..v.rows()).map(|i| v.get(i, i)).collect());
        Ok(self.tape.push(out, Op::Diag { a: self.id }))
    }

    /// Lower triangle including the diagonal; the strict upper part is zeroed.
    pub fn tril(&self) -> Var<'t> {
        let mut out = (*self.value()).clone();
        for i in 0..out.rows() {
            for j in i + 1..out.cols() {
                out.set(i, j, 0.0);
            }
        }
        self.tape.push(out, Op::Tril { a: self.id })
    }

    pub fn clamp_min(&self, floor: f64) -> Var<'t> {
        let out = self.value().map(|x| x.max(floor));
        self.tape.push(out, Op::ClampMin { a: self.id, floor })
    }

    /// Pairwise squared Euclidean distances between the rows of `self` (n×d)
    /// and `other` (m×d).
    pub fn sq_dist(&self, other: &Var<'t>) -> Result<Var<'t>, AdError> {
        self.check_same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.cols() != b.cols() {
            return Err(AdError::Shape {
                op: "sq_dist",
                detail: format!("{} with {}", a.shape(), b.shape()),
            });
        }
        let mut out = Tensor::zeros(a.rows(), b.rows());
        for i in 0..a.rows() {
            let ai = a.row(i);
            for j in 0..b.rows() {
                let d: f64 = ai.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                out.set(i, j, d);
            }
        }
        Ok(self.tape.push(
            out,
            Op::SqDist {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Lower Cholesky factor of `sym(self)` with the escalating jitter policy
    /// of [`linalg::cholesky_jittered`]. The jitter term is differentiated.
    pub fn cholesky(&self) -> Result<Var<'t>, AdError> {
        let f = linalg::cholesky_jittered(&self.value())?;
        Ok(self.tape.push(
            f.l,
            Op::Cholesky {
                a: self.id,
                coef: f.coef,
            },
        ))
    }

    /// Solves with `self` as a lower-triangular factor.
    pub fn tri_solve(&self, b: &Var<'t>, side: Side) -> Result<Var<'t>, AdError> {
        self.check_same_tape(b);
        let (l, rhs) = (self.value(), b.value());
        let out = match side {
            Side::Lower => linalg::solve_lower(&l, &rhs)?,
            Side::LowerTransposed => linalg::solve_lower_t(&l, &rhs)?,
        };
        Ok(self.tape.push(
            out,
            Op::TriSolve {
                l: self.id,
                b: b.id,
                side,
            },
        ))
    }

    /// `log det(l·lᵀ) = 2·Σ log l_ii` for a factor with positive diagonal.
    pub fn logdet_from_chol(&self) -> Result<Var<'t>, AdError> {
        let l = self.value();
        if !l.shape().is_square() {
            return Err(AdError::Shape {
                op: "logdet_from_chol",
                detail: format!("non-square {}", l.shape()),
            });
        }
        let mut acc = 0.0;
        for i in 0..l.rows() {
            let d = l.get(i, i);
            if !(d > 0.0) {
                return Err(AdError::Domain {
                    op: "logdet_from_chol",
                    value: d,
                });
            }
            acc += d.ln();
        }
        Ok(self.tape.push(Tensor::scalar(2.0 * acc), Op::LogDetChol { l: self.id }))
    }

    /// Sub-block `[row0, row0+rows) × [col0, col0+cols)`.
    pub fn slice(&self, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var<'t>, AdError> {
        let v = self.value();
        if row0 + rows > v.rows() || col0 + cols > v.cols() {
            return Err(AdError::Shape {
                op: "slice",
                detail: format!("[{row0}+{rows}, {col0}+{cols}] out of {}", v.shape()),
            });
        }
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            out.as_mut_slice()[i * cols..(i + 1) * cols].copy_from_slice(&v.row(row0 + i)[col0..col0 + cols]);
        }
        Ok(self.tape.push(out, Op::Slice { a: self.id, row0, col0 }))
    }

    /// Stacks `times` copies of `self` vertically.
    pub fn tile_rows(&self, times: usize) -> Var<'t> {
        let v = self.value();
        let mut data = Vec::with_capacity(v.len() * times);
        for _ in 0..times {
            data.extend_from_slice(v.as_slice());
        }
        let out = Tensor::from_vec(v.rows() * times, v.cols(), data).expect("tile shape");
        self.tape.push(out, Op::TileRows { a: self.id, times })
    }

    /// Same elements in row-major order, new extents.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var<'t>, AdError> {
        let v = self.value();
        let out = Tensor::from_vec(rows, cols, v.as_slice().to_vec())?;
        Ok(self.tape.push(out, Op::Reshape { a: self.id }))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>, AdError> {
        let first = parts.first().ok_or_else(|| AdError::Shape {
            op: "concat_rows",
            detail: "no parts".into(),
        })?;
        let cols = first.shape().cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            first.check_same_tape(p);
            let v = p.value();
            if v.cols() != cols {
                return Err(AdError::Shape {
                    op: "concat_rows",
                    detail: format!("{} columns, expected {cols}", v.cols()),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(first.tape.push(
            out,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, AdError> {
        let first = parts.first().ok_or_else(|| AdError::Shape {
            op: "concat_cols",
            detail: "no parts".into(),
        })?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let rows = first.shape().rows;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        if let Some(v) = values.iter().find(|v| v.rows() != rows) {
            return Err(AdError::Shape {
                op: "concat_cols",
                detail: format!("{} rows, expected {rows}", v.rows()),
            });
        }
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut c0 = 0;
            for v in &values {
                out.as_mut_slice()[i * cols + c0..i * cols + c0 + v.cols()].copy_from_slice(v.row(i));
                c0 += v.cols();
            }
        }
        Ok(first.tape.push(
            out,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }
}
