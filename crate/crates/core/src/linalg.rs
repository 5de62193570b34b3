//! Small dense linear algebra helpers used throughout the crate.
//!
//! All matrices here are tiny (neighborhood-sized, at most a few dozen rows),
//! so plain triangular loops beat any BLAS dispatch overhead.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Returns an error if a non-positive pivot is encountered.
pub fn cholesky(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!(
            "cholesky of non-square {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Degenerate(format!(
                        "non-positive pivot {s:e} at row {i} during Cholesky"
                    )));
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve `L x = b` with `L` lower triangular.
pub fn solve_lower(l: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve `L^T x = b` with `L` lower triangular.
pub fn solve_lower_transpose(l: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve the SPD system `A x = b` given the Cholesky factor `L` of `A`.
pub fn cholesky_solve(l: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let z = solve_lower(l, b);
    solve_lower_transpose(l, &z.view())
}

/// Inverse of an SPD matrix via its Cholesky factorization.
pub fn spd_inverse(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky(a)?;
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let col = cholesky_solve(&l.view(), &e.view());
        inv.column_mut(j).assign(&col);
    }
    // Symmetrize to wash out round-off asymmetry.
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = m;
            inv[[j, i]] = m;
        }
    }
    Ok(inv)
}

/// log|A| for SPD `A` given its lower Cholesky factor.
pub fn log_det_from_cholesky(l: &ArrayView2<f64>) -> f64 {
    (0..l.nrows()).map(|i| l[[i, i]].ln()).sum::<f64>() * 2.0
}

/// Eigen-decomposition of a symmetric 2x2 matrix: returns (eigenvalues, eigenvectors as columns).
pub fn sym_eig_2x2(a: &ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let (p, q, r) = (a[[0, 0]], a[[0, 1]], a[[1, 1]]);
    let tr = p + r;
    let gap = ((p - r) * (p - r) + 4.0 * q * q).sqrt();
    let l1 = 0.5 * (tr + gap);
    let l2 = 0.5 * (tr - gap);
    let mut v = Array2::<f64>::zeros((2, 2));
    if q.abs() > 1e-300 {
        for (j, lam) in [l1, l2].iter().enumerate() {
            let (vx, vy) = (q, lam - p);
            let norm = (vx * vx + vy * vy).sqrt();
            v[[0, j]] = vx / norm;
            v[[1, j]] = vy / norm;
        }
    } else {
        // Already diagonal; order eigenvectors to match (l1, l2).
        if p >= r {
            v[[0, 0]] = 1.0;
            v[[1, 1]] = 1.0;
        } else {
            v[[1, 0]] = 1.0;
            v[[0, 1]] = 1.0;
        }
    }
    (ndarray::arr1(&[l1, l2]), v)
}

/// Numerically stable log(sum(exp(v))).
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}
