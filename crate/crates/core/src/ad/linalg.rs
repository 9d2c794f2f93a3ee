//! Dense factorization and triangular-solve kernels on plain tensors.
//!
//! The tape ops in [`super::ops`] call into these for both the forward value
//! and the reverse rules.

use super::tensor::{gemm, MatRef, Tensor};
use super::AdError;

/// Relative jitter added before the first factorization attempt.
pub const JITTER_START: f64 = 1e-6;
/// Largest relative jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-2;

/// In-place lower Cholesky of a symmetric matrix. Only the lower triangle is
/// read; the strict upper triangle is zeroed. Returns the failing pivot.
pub fn cholesky_in_place(a: &mut Tensor) -> Result<(), usize> {
    let n = a.rows();
    let d = a.as_mut_slice();
    for j in 0..n {
        let (head, tail) = d.split_at_mut(j * n);
        let row_j = &mut tail[..n];
        for k in 0..j {
            let row_k = &head[k * n..k * n + n];
            let s: f64 = row_j[..k].iter().zip(&row_k[..k]).map(|(a, b)| a * b).sum();
            row_j[k] = (row_j[k] - s) / row_k[k];
        }
        let s: f64 = row_j[..j].iter().map(|v| v * v).sum();
        let pivot = row_j[j] - s;
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(j);
        }
        row_j[j] = pivot.sqrt();
        for v in &mut row_j[j + 1..] {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Result of a jittered factorization: `l·lᵀ = a + jitter·I`.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub l: Tensor,
    /// Relative coefficient `c`; the absolute jitter is `c·mean(diag(a))`.
    pub coef: f64,
    pub jitter: f64,
}

/// Factorizes `sym(a) + c·mean(diag(a))·I`, escalating `c` tenfold from
/// [`JITTER_START`] to [`JITTER_MAX`].
pub fn cholesky_jittered(a: &Tensor) -> Result<JitteredCholesky, AdError> {
    let n = a.rows();
    if !a.shape().is_square() {
        return Err(AdError::Shape {
            op: "cholesky",
            detail: format!("non-square input {}", a.shape()),
        });
    }
    let mut sym = a.clone();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            sym.set(i, j, v);
            sym.set(j, i, v);
        }
    }
    let mean_diag = (0..n).map(|i| sym.get(i, i)).sum::<f64>() / n.max(1) as f64;
    let mut coef = JITTER_START;
    let mut last_pivot = 0;
    while coef <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = coef * mean_diag;
        let mut l = sym.clone();
        for i in 0..n {
            let v = l.get(i, i) + jitter;
            l.set(i, i, v);
        }
        match cholesky_in_place(&mut l) {
            Ok(()) => return Ok(JitteredCholesky { l, coef, jitter }),
            Err(p) => last_pivot = p,
        }
        coef *= 10.0;
    }
    Err(AdError::Decomposition { pivot: last_pivot })
}

fn check_diag(l: &Tensor, op: &'static str) -> Result<(), AdError> {
    if !l.shape().is_square() {
        return Err(AdError::Shape {
            op,
            detail: format!("non-square factor {}", l.shape()),
        });
    }
    for i in 0..l.rows() {
        if l.get(i, i) == 0.0 {
            return Err(AdError::Singular { index: i });
        }
    }
    Ok(())
}

const SOLVE_BLOCK: usize = 32;

fn check_solve(l: &Tensor, b: &Tensor) -> Result<(), AdError> {
    check_diag(l, "tri_solve")?;
    if b.rows() != l.rows() {
        return Err(AdError::Shape {
            op: "tri_solve",
            detail: format!("factor {} with rhs {}", l.shape(), b.shape()),
        });
    }
    Ok(())
}

/// `c ← c − a·b` on raw row-major panels. `a` is `m×k` with strides
/// `(rsa, csa)`, `b` is `k×n` and `c` is `m×n`, both contiguous with row
/// stride `n`.
#[allow(clippy::too_many_arguments)]
fn panel_update(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], c: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "panel a out of bounds");
    assert!(b.len() >= k * n && c.len() >= m * n, "panel out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            -1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Solves `l·x = b` in place (`b` becomes `x`). Reads only the lower triangle.
pub fn solve_lower_in_place(l: &Tensor, b: &mut Tensor) -> Result<(), AdError> {
    check_solve(l, b)?;
    let n = l.rows();
    let m = b.cols();
    let ld = l.as_slice();
    let x = b.as_mut_slice();
    for i0 in (0..n).step_by(SOLVE_BLOCK) {
        let i1 = (i0 + SOLVE_BLOCK).min(n);
        let (done, rest) = x.split_at_mut(i0 * m);
        panel_update(i1 - i0, i0, m, &ld[i0 * n..], n, 1, done, rest);
        for i in i0..i1 {
            let (above, tail) = rest.split_at_mut((i - i0) * m);
            let row_i = &mut tail[..m];
            let lrow = l.row(i);
            for k in i0..i {
                let c = lrow[k];
                if c != 0.0 {
                    let row_k = &above[(k - i0) * m..(k - i0 + 1) * m];
                    for (xi, xk) in row_i.iter_mut().zip(row_k) {
                        *xi -= c * xk;
                    }
                }
            }
            let inv = 1.0 / lrow[i];
            row_i.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(())
}

/// Solves `lᵀ·x = b` in place. Reads only the lower triangle of `l`.
pub fn solve_lower_t_in_place(l: &Tensor, b: &mut Tensor) -> Result<(), AdError> {
    check_solve(l, b)?;
    let n = l.rows();
    let m = b.cols();
    let ld = l.as_slice();
    let x = b.as_mut_slice();
    let mut i1 = n;
    while i1 > 0 {
        let i0 = i1.saturating_sub(SOLVE_BLOCK);
        let (head, solved) = x.split_at_mut(i1 * m);
        let block = &mut head[i0 * m..];
        if i1 < n {
            panel_update(i1 - i0, n - i1, m, &ld[i1 * n + i0..], 1, n, solved, block);
        }
        for i in (i0..i1).rev() {
            let (above, tail) = block.split_at_mut((i - i0) * m);
            let row_i = &mut tail[..m];
            let inv = 1.0 / l.get(i, i);
            row_i.iter_mut().for_each(|v| *v *= inv);
            let lrow = l.row(i);
            for k in i0..i {
                let c = lrow[k];
                if c != 0.0 {
                    let row_k = &mut above[(k - i0) * m..(k - i0 + 1) * m];
                    for (xk, xi) in row_k.iter_mut().zip(row_i.iter()) {
                        *xk -= c * xi;
                    }
                }
            }
        }
        i1 = i0;
    }
    Ok(())
}

pub fn solve_lower(l: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
    let mut x = b.clone();
    solve_lower_in_place(l, &mut x)?;
    Ok(x)
}

pub fn solve_lower_t(l: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
    let mut x = b.clone();
    solve_lower_t_in_place(l, &mut x)?;
    Ok(x)
}

/// Reverse rule for `l = chol(sym(a) + c·tr(a)/n·I)`.
pub(crate) fn cholesky_backward(l: &Tensor, l_bar: &Tensor, coef: f64) -> Result<Tensor, AdError> {
    let n = l.rows();
    // P = Φ(lᵀ·l̄): lower triangle with halved diagonal.
    let mut p = Tensor::zeros(n, n);
    gemm(1.0, MatRef::transposed(l), MatRef::normal(l_bar), 0.0, &mut p);
    for i in 0..n {
        for j in i + 1..n {
            p.set(i, j, 0.0);
        }
        let v = p.get(i, i) * 0.5;
        p.set(i, i, v);
    }
    // G = l⁻ᵀ P l⁻¹
    let x = solve_lower_t(l, &p)?;
    let g = solve_lower_t(l, &x.transpose())?.transpose();
    let mut out = Tensor::zeros(n, n);
    let mut trace = 0.0;
    for i in 0..n {
        trace += g.get(i, i);
        for j in 0..n {
            out.set(i, j, 0.5 * (g.get(i, j) + g.get(j, i)));
        }
    }
    let diag_bump = coef * trace / n as f64;
    for i in 0..n {
        let v = out.get(i, i) + diag_bump;
        out.set(i, i, v);
    }
    Ok(out)
}
