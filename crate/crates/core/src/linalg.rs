//! Thin wrappers over `faer` for the dense complex problems used throughout
//! the crate, plus a few vector helpers on `&[c64]`.

use faer::{Mat, Side};
use num_complex::Complex64 as c64;

use crate::error::{Error, Result};

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
pub fn eigh(a: &Mat<c64>) -> Result<(Vec<f64>, Mat<c64>)> {
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::EigFailed(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let values: Vec<f64> = (0..s.nrows()).map(|i| s[i].re).collect();
    let vectors = evd.U().to_owned();
    if !values.iter().all(|x| x.is_finite()) || !all_finite(&vectors) {
        return Err(Error::EigFailed("eigensolver returned non-finite values".into()));
    }
    Ok((values, vectors))
}

/// Eigenvalues of a general complex square matrix.
pub fn eigenvalues_general(a: &Mat<c64>) -> Result<Vec<c64>> {
    a.eigenvalues().map_err(|e| Error::EigFailed(format!("{e:?}")))
}

/// Thin SVD `a = U diag(s) V^H` with singular values descending.
pub fn svd(a: &Mat<c64>) -> Result<(Mat<c64>, Vec<f64>, Mat<c64>)> {
    let svd = a.svd().map_err(|e| Error::EigFailed(format!("{e:?}")))?;
    let s = svd.S().column_vector();
    let values: Vec<f64> = (0..s.nrows()).map(|i| s[i].re).collect();
    let (u, v) = (svd.U().to_owned(), svd.V().to_owned());
    if !values.iter().all(|x| x.is_finite()) || !all_finite(&u) || !all_finite(&v) {
        return Err(Error::EigFailed("SVD returned non-finite factors".into()));
    }
    Ok((u, values, v))
}

pub fn all_finite(a: &Mat<c64>) -> bool {
    (0..a.ncols()).all(|j| (0..a.nrows()).all(|i| a[(i, j)].re.is_finite() && a[(i, j)].im.is_finite()))
}

/// Largest entry of `|a - a^H|`.
pub fn hermiticity_defect(a: &Mat<c64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in 0..n {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn max_abs(a: &Mat<c64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            worst = worst.max(a[(i, j)].norm());
        }
    }
    worst
}

/// Largest entrywise modulus of `a - b`.
pub fn max_abs_diff(a: &Mat<c64>, b: &Mat<c64>) -> f64 {
    assert_eq!(a.nrows(), b.nrows());
    assert_eq!(a.ncols(), b.ncols());
    let mut worst = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            worst = worst.max((a[(i, j)] - b[(i, j)]).norm());
        }
    }
    worst
}

pub fn matvec(a: &Mat<c64>, x: &[c64]) -> Vec<c64> {
    assert_eq!(a.ncols(), x.len());
    let mut y = vec![c64::new(0.0, 0.0); a.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        if xj == c64::new(0.0, 0.0) {
            continue;
        }
        let col = a.col(j);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += col[i] * xj;
        }
    }
    y
}

/// `a^H x`.
pub fn matvec_adjoint(a: &Mat<c64>, x: &[c64]) -> Vec<c64> {
    assert_eq!(a.nrows(), x.len());
    (0..a.ncols())
        .map(|j| {
            let col = a.col(j);
            x.iter()
                .enumerate()
                .map(|(i, &xi)| col[i].conj() * xi)
                .sum()
        })
        .collect()
}

/// Hermitian inner product `<x, y> = sum conj(x_i) y_i`.
pub fn dot(x: &[c64], y: &[c64]) -> c64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

pub fn norm_sqr(x: &[c64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum()
}

pub fn norm(x: &[c64]) -> f64 {
    norm_sqr(x).sqrt()
}

pub fn column(a: &Mat<c64>, j: usize) -> Vec<c64> {
    let col = a.col(j);
    (0..a.nrows()).map(|i| col[i]).collect()
}

pub fn zeros(n: usize) -> Vec<c64> {
    vec![c64::new(0.0, 0.0); n]
}
