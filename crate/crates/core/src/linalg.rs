//! Dense complex linear algebra helpers shared across the crate.
//!
//! Kernels and covariance blocks are stored as `ndarray` matrices; the
//! eigen/LU work is delegated to nalgebra. Matrices here are small (a few
//! thousand rows at most), so conversions are not a bottleneck.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub fn to_na(a: &Array2<C64>) -> DMatrix<C64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_na(m: &DMatrix<C64>) -> Array2<C64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Eigendecomposition of a Hermitian matrix. Returns (eigenvalues, eigenvectors)
/// with eigenvalues descending and eigenvectors as columns.
pub fn hermitian_eigen(a: &Array2<C64>) -> Result<(Array1<f64>, Array2<C64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Numerical("hermitian_eigen: matrix not square".into()));
    }
    if !a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::Numerical("hermitian_eigen: non-finite entries".into()));
    }
    // Symmetrize to suppress round-off asymmetry before factorizing.
    let mut h = to_na(a);
    let ht = h.adjoint();
    h = (h + ht).scale(0.5);
    let eig = SymmetricEigen::new(h);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let vals = Array1::from_iter(idx.iter().map(|&i| eig.eigenvalues[i]));
    let vecs = Array2::from_shape_fn((n, n), |(r, c)| eig.eigenvectors[(r, idx[c])]);
    Ok((vals, vecs))
}

/// log|det(A)| and the phase of det(A) via partial-pivot LU, together with a
/// crude reciprocal-condition estimate from the pivot magnitudes.
pub struct LuDet {
    pub log_abs: f64,
    pub phase: C64,
    pub rcond_estimate: f64,
}

/// LU determinant of a complex matrix (partial pivoting, in place on a copy).
pub fn lu_det(a: &Array2<C64>) -> Result<LuDet> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Numerical("lu_det: matrix not square".into()));
    }
    let mut m = a.clone();
    let mut sign = C64::new(1.0, 0.0);
    let mut log_abs = 0.0f64;
    let mut phase = C64::new(1.0, 0.0);
    let mut max_piv: f64 = 0.0;
    let mut min_piv = f64::INFINITY;
    for k in 0..n {
        // pivot search
        let mut p = k;
        let mut best = m[[k, k]].norm();
        for r in (k + 1)..n {
            let v = m[[r, k]].norm();
            if v > best {
                best = v;
                p = r;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return Err(Error::Numerical(format!(
                "lu_det: singular or non-finite pivot at step {k} (|pivot|={best:.3e})"
            )));
        }
        if p != k {
            for c in 0..n {
                let tmp = m[[k, c]];
                m[[k, c]] = m[[p, c]];
                m[[p, c]] = tmp;
            }
            sign = -sign;
        }
        let piv = m[[k, k]];
        let pn = piv.norm();
        max_piv = max_piv.max(pn);
        min_piv = min_piv.min(pn);
        log_abs += pn.ln();
        phase *= piv / pn;
        let inv = C64::new(1.0, 0.0) / piv;
        for r in (k + 1)..n {
            let f = m[[r, k]] * inv;
            if f.norm() == 0.0 {
                continue;
            }
            m[[r, k]] = f;
            for c in (k + 1)..n {
                let v = m[[k, c]];
                m[[r, c]] -= f * v;
            }
        }
    }
    Ok(LuDet {
        log_abs,
        phase: phase * sign,
        rcond_estimate: if max_piv > 0.0 { min_piv / max_piv } else { 0.0 },
    })
}

/// det(A) as a complex number; prefer [`lu_det`] when only magnitudes matter.
pub fn det(a: &Array2<C64>) -> Result<C64> {
    let d = lu_det(a)?;
    Ok(d.phase * d.log_abs.exp())
}

/// Hermitian square root of a PSD matrix; eigenvalues clipped at zero.
pub fn hermitian_sqrt(a: &Array2<C64>) -> Result<Array2<C64>> {
    let (vals, vecs) = hermitian_eigen(a)?;
    let n = a.nrows();
    let mut out = Array2::zeros((n, n));
    for k in 0..n {
        let s = vals[k].max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += vecs[[i, k]] * s * vecs[[j, k]].conj();
            }
        }
    }
    Ok(out)
}

/// 1 + A for square complex A.
pub fn one_plus(a: &Array2<C64>) -> Array2<C64> {
    let mut m = a.clone();
    for i in 0..m.nrows() {
        m[[i, i]] += 1.0;
    }
    m
}

/// Singular values of a complex matrix, descending, via the Gram eigenproblem.
pub fn singular_values(a: &Array2<C64>) -> Result<Array1<f64>> {
    let (rows, cols) = (a.nrows(), a.ncols());
    let gram = if rows >= cols {
        let mut g = Array2::zeros((cols, cols));
        ndarray::linalg::general_mat_mul(
            C64::new(1.0, 0.0),
            &a.t().mapv(|z| z.conj()),
            a,
            C64::new(0.0, 0.0),
            &mut g,
        );
        g
    } else {
        let mut g = Array2::zeros((rows, rows));
        ndarray::linalg::general_mat_mul(
            C64::new(1.0, 0.0),
            a,
            &a.t().mapv(|z| z.conj()),
            C64::new(0.0, 0.0),
            &mut g,
        );
        g
    };
    let (vals, _) = hermitian_eigen(&gram)?;
    Ok(vals.mapv(|v| v.max(0.0).sqrt()))
}

/// Frobenius (Hilbert-Schmidt) norm.
pub fn hs_norm(a: &Array2<C64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Max absolute entry.
pub fn max_abs(a: &Array2<C64>) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn matmul(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    ndarray::linalg::general_mat_mul(C64::new(1.0, 0.0), a, b, C64::new(0.0, 0.0), &mut out);
    out
}

pub fn adjoint(a: &Array2<C64>) -> Array2<C64> {
    a.t().mapv(|z| z.conj())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn lu_det_matches_closed_form_2x2() {
        let a = array![
            [C64::new(1.0, 2.0), C64::new(0.5, -1.0)],
            [C64::new(-0.3, 0.1), C64::new(2.0, 0.0)]
        ];
        let d = det(&a).unwrap();
        let expect = a[[0, 0]] * a[[1, 1]] - a[[0, 1]] * a[[1, 0]];
        assert_relative_eq!(d.re, expect.re, max_relative = 1e-12);
        assert_relative_eq!(d.im, expect.im, max_relative = 1e-12);
    }

    #[test]
    fn lu_det_rejects_singular() {
        let a = array![
            [C64::new(1.0, 0.0), C64::new(2.0, 0.0)],
            [C64::new(2.0, 0.0), C64::new(4.0, 0.0)]
        ];
        assert!(lu_det(&a).is_err());
    }

    #[test]
    fn hermitian_eigen_reconstructs() {
        let a = array![
            [C64::new(2.0, 0.0), C64::new(0.3, 0.4)],
            [C64::new(0.3, -0.4), C64::new(1.0, 0.0)]
        ];
        let (vals, vecs) = hermitian_eigen(&a).unwrap();
        assert!(vals[0] >= vals[1]);
        let mut rec = Array2::<C64>::zeros((2, 2));
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    rec[[i, j]] += vecs[[i, k]] * vals[k] * vecs[[j, k]].conj();
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(rec[[i, j]].re, a[[i, j]].re, epsilon = 1e-12);
                assert_relative_eq!(rec[[i, j]].im, a[[i, j]].im, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sqrt_squares_back() {
        let a = array![
            [C64::new(2.0, 0.0), C64::new(0.3, 0.4)],
            [C64::new(0.3, -0.4), C64::new(1.0, 0.0)]
        ];
        let s = hermitian_sqrt(&a).unwrap();
        let sq = matmul(&s, &s);
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(sq[[i, j]].re, a[[i, j]].re, epsilon = 1e-12);
                assert_relative_eq!(sq[[i, j]].im, a[[i, j]].im, epsilon = 1e-12);
            }
        }
    }
}
