//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Thin SVD `a = u * diag(s) * v^T` with singular values sorted descending.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl ThinSvd {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("matrix has non-finite entries".into()));
        }
        let svd = a.clone().svd(true, true);
        let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
            return Err(Error::Numerical("svd did not produce singular vectors".into()));
        };
        let k = svd.singular_values.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let s = order.iter().map(|&i| svd.singular_values[i]).collect();
        let u = DMatrix::from_fn(u.nrows(), k, |r, c| u[(r, order[c])]);
        let v = DMatrix::from_fn(v_t.ncols(), k, |r, c| v_t[(order[c], r)]);
        Ok(Self { u, s, v })
    }

    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.v.nrows()
    }

    /// Number of singular values strictly above `threshold`.
    pub fn rank_above(&self, threshold: f64) -> usize {
        self.s.iter().take_while(|&&s| s > threshold).count()
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
/// Wraps `matrixmultiply::dgemm` so transposed operands are read through
/// strides instead of being copied.
pub fn gemm(
    alpha: f64,
    a: &DMatrix<f64>,
    transpose_a: bool,
    b: &DMatrix<f64>,
    transpose_b: bool,
    beta: f64,
    c: &mut DMatrix<f64>,
) {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let (m, k, a_rs, a_cs) = if transpose_a { (ac, ar, ar, 1) } else { (ar, ac, 1, ar) };
    let (kb, n, b_rs, b_cs) = if transpose_b { (bc, br, br, 1) } else { (br, bc, 1, br) };
    assert_eq!(k, kb, "gemm: inner dimensions differ");
    assert_eq!(c.shape(), (m, n), "gemm: output has the wrong shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale_mut(beta);
        return;
    }
    let c_rs = 1isize;
    let c_cs = m as isize;
    // SAFETY: the strides describe the column-major storage of each matrix
    // and the asserted shapes keep every access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs,
            c_cs,
        );
    }
}

pub fn singular_values(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let mut s: Vec<f64> = a.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

pub fn row_norms(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(a.nrows(), |i, _| a.row(i).norm())
}

/// Block-diagonal matrix with `copies` copies of `a`.
pub fn block_diagonal(a: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let (r, c) = a.shape();
    let mut out = DMatrix::zeros(r * copies, c * copies);
    for k in 0..copies {
        out.view_mut((k * r, k * c), (r, c)).copy_from(a);
    }
    out
}

/// Solves a tridiagonal system in place (Thomas algorithm). `lower[i]`
/// couples row `i + 1` to row `i`, `upper[i]` couples row `i` to `i + 1`.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) -> Result<()> {
    let n = diag.len();
    debug_assert!(lower.len() + 1 == n && upper.len() + 1 == n && rhs.len() == n);
    if n == 0 {
        return Ok(());
    }
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    if beta == 0.0 {
        return Err(Error::Numerical("zero pivot in tridiagonal solve".into()));
    }
    rhs[0] /= beta;
    for i in 1..n {
        c[i - 1] = upper[i - 1] / beta;
        beta = diag[i] - lower[i - 1] * c[i - 1];
        if beta == 0.0 || !beta.is_finite() {
            return Err(Error::Numerical("zero pivot in tridiagonal solve".into()));
        }
        rhs[i] = (rhs[i] - lower[i - 1] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_sorted_and_reconstructs() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.0]);
        let svd = ThinSvd::new(&a).unwrap();
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        let rebuilt = &svd.u * DMatrix::from_diagonal(&DVector::from_vec(svd.s.clone())) * svd.v.transpose();
        assert!((rebuilt - a).amax() < 1e-14);
    }

    #[test]
    fn gemm_transposes_match_nalgebra() {
        let a = DMatrix::from_fn(7, 9, |i, j| (i as f64 - 2.0 * j as f64).sin());
        let b = DMatrix::from_fn(9, 6, |i, j| (i * j) as f64 * 0.1 - 1.0);
        let mut c = DMatrix::zeros(7, 6);
        gemm(1.0, &a, false, &b, false, 0.0, &mut c);
        assert!((&c - &a * &b).amax() < 1e-12);
        let at = a.transpose();
        let bt = b.transpose();
        let mut c2 = DMatrix::from_element(7, 6, 1.0);
        gemm(2.0, &at, true, &bt, true, 1.0, &mut c2);
        assert!((c2 - (&a * &b * 2.0).add_scalar(1.0)).amax() < 1e-12);
    }

    #[test]
    fn tridiagonal_matches_dense() {
        let lower = [1.0, -0.5, 0.25];
        let diag = [4.0, 5.0, 6.0, 3.0];
        let upper = [0.5, 1.0, -1.0];
        let mut dense = DMatrix::<f64>::zeros(4, 4);
        for i in 0..4 {
            dense[(i, i)] = diag[i];
        }
        for i in 0..3 {
            dense[(i + 1, i)] = lower[i];
            dense[(i, i + 1)] = upper[i];
        }
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let x = dense.clone().lu().solve(&b).unwrap();
        let mut rhs = b.as_slice().to_vec();
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs).unwrap();
        for i in 0..4 {
            assert!((rhs[i] - x[i]).abs() < 1e-14);
        }
    }
}
