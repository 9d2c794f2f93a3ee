use std::fmt;

use serde::{Deserialize, Serialize};

use super::AdError;

/// Extents of a dense row-major matrix. Scalars are `1×1`, column vectors `n×1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdError> {
        if rows * cols != data.len() {
            return Err(AdError::Shape {
                op: "from_vec",
                detail: format!("{} elements for shape {rows}x{cols}", data.len()),
            });
        }
        Ok(Tensor {
            shape: Shape { rows, cols },
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AdError> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(AdError::Shape {
                    op: "from_rows",
                    detail: format!("row {i} has {} entries, expected {d}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::from_vec(n, d, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Tensor {
            shape: Shape { rows, cols },
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::full(1, 1, v)
    }

    pub fn column(v: Vec<f64>) -> Self {
        let n = v.len();
        Tensor {
            shape: Shape { rows: n, cols: 1 },
            data: v,
        }
    }

    pub fn row_vector(v: Vec<f64>) -> Self {
        let n = v.len();
        Tensor {
            shape: Shape { rows: 1, cols: n },
            data: v,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    pub fn cols(&self) -> usize {
        self.shape.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape.cols;
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape.cols;
        &self.data[i * c..(i + 1) * c]
    }

    /// Value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|a| *a = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Tensor {
        let Shape { rows, cols } = self.shape;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = self.data[i * cols + j];
            }
        }
        Tensor {
            shape: Shape { rows: cols, cols: rows },
            data: out,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, AdError> {
        if self.cols() != other.rows() {
            return Err(AdError::Shape {
                op: "matmul",
                detail: format!("{} · {}", self.shape, other.shape),
            });
        }
        let mut out = Tensor::zeros(self.rows(), other.cols());
        gemm(1.0, MatRef::normal(self), MatRef::normal(other), 0.0, &mut out);
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: Shape {
                rows: idx.len(),
                cols: c,
            },
            data,
        }
    }
}

/// Borrowed matrix operand for [`gemm`], optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn normal(t: &'a Tensor) -> Self {
        MatRef {
            data: &t.data,
            rows: t.rows(),
            cols: t.cols(),
            rs: t.cols() as isize,
            cs: 1,
        }
    }

    pub(crate) fn transposed(t: &'a Tensor) -> Self {
        MatRef {
            data: &t.data,
            rows: t.cols(),
            cols: t.rows(),
            rs: 1,
            cs: t.cols() as isize,
        }
    }
}

/// `c ← alpha·a·b + beta·c`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut Tensor) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(c.rows(), a.rows, "gemm output rows");
    assert_eq!(c.cols(), b.cols, "gemm output cols");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale_assign(beta);
        return;
    }
    let rsc = c.cols() as isize;
    // SAFETY: strides and extents describe the exact buffers borrowed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            rsc,
            1,
        );
    }
}
