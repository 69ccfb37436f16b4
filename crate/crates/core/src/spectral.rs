//! The reduced selfadjoint generator `K = Lambda (iJ) Lambda`,
//! `Lambda = B^{1/2}`, its eigenpairs (the dispersion relations) and the
//! positivity and growth diagnostics built on them.
//!
//! The functions here work on dense matrices and follow the definitions
//! literally. The production solver in [`crate::fiber`] produces the same
//! [`SpectralData`] blockwise and resolves the soft ion directions exactly.

use faer::Mat;
use num_complex::Complex64 as c64;
use serde::{Deserialize, Serialize};

use crate::assembly::SymplecticForm;
use crate::basis::PlaneWaveBasis;
use crate::error::{Error, Result};
use crate::linalg::{eigenvalues_general, eigh};

/// Default relative tolerance for harmless negative eigenvalues of `B`.
pub const TOL_PSD: f64 = 1e-8;

/// Frequencies whose moduli agree to this relative precision are ordered
/// by signed value.
pub const TIE_TOL: f64 = 1e-12;

/// Eigenpairs of `K(theta)`; `omegas` sorted by modulus.
#[derive(Clone, Debug)]
pub struct SpectralData {
    pub theta: [f64; 3],
    pub omegas: Vec<f64>,
    /// Orthonormal eigenvectors, column `k` for `omegas[k]`.
    pub vectors: Mat<c64>,
    pub lambda_min_b: f64,
    pub kappa: f64,
}

impl SpectralData {
    pub fn dim(&self) -> usize {
        self.omegas.len()
    }

    pub fn min_abs_omega(&self) -> f64 {
        self.omegas.iter().fold(f64::INFINITY, |m, w| m.min(w.abs()))
    }

    pub fn max_abs_omega(&self) -> f64 {
        self.omegas.iter().fold(0.0, |m, w| m.max(w.abs()))
    }

    /// `<v_k, z>` for every column.
    pub fn coefficients(&self, z: &[c64]) -> Vec<c64> {
        crate::linalg::matvec_adjoint(&self.vectors, z)
    }

    /// `sum_k f(omega_k) v_k <v_k, z>`.
    pub fn apply_function(&self, z: &[c64], f: impl Fn(f64) -> c64) -> Vec<c64> {
        let coef = self.coefficients(z);
        let scaled: Vec<c64> = coef
            .iter()
            .zip(&self.omegas)
            .map(|(c, &w)| c * f(w))
            .collect();
        crate::linalg::matvec(&self.vectors, &scaled)
    }

    /// `exp(-i K t) z`.
    pub fn propagate(&self, z: &[c64], t: f64) -> Vec<c64> {
        self.apply_function(z, |w| c64::from_polar(1.0, -w * t))
    }
}

/// Sorts by `|omega|`, breaking near-ties by signed value, and fixes every
/// eigenvector's phase so that its leading large component is real
/// positive.
pub fn order_spectrum(omegas: &[f64], vectors: &Mat<c64>) -> (Vec<f64>, Mat<c64>) {
    let n = omegas.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        omegas[a]
            .abs()
            .total_cmp(&omegas[b].abs())
            .then(omegas[a].total_cmp(&omegas[b]))
    });
    // groups of near-equal modulus, ordered by signed value
    let mut start = 0;
    while start < n {
        let base = omegas[idx[start]].abs();
        let mut end = start + 1;
        while end < n && omegas[idx[end]].abs() - base <= TIE_TOL * base {
            end += 1;
        }
        idx[start..end].sort_by(|&a, &b| omegas[a].total_cmp(&omegas[b]));
        start = end;
    }
    let sorted: Vec<f64> = idx.iter().map(|&k| omegas[k]).collect();
    let mut out = Mat::<c64>::zeros(vectors.nrows(), n);
    for (col, &k) in idx.iter().enumerate() {
        let src = vectors.col(k);
        let phase = phase_anchor(&(0..vectors.nrows()).map(|i| src[i]).collect::<Vec<_>>());
        for i in 0..vectors.nrows() {
            out[(i, col)] = src[i] * phase;
        }
    }
    (sorted, out)
}

/// Unit factor making the first component within `1e-8` of the largest
/// modulus real and positive.
pub fn phase_anchor(v: &[c64]) -> c64 {
    let max = v.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    if max == 0.0 {
        return c64::new(1.0, 0.0);
    }
    let lead = v
        .iter()
        .find(|z| z.norm() >= (1.0 - 1e-8) * max)
        .copied()
        .unwrap_or(c64::new(1.0, 0.0));
    lead.conj() / lead.norm()
}

#[derive(Clone, Debug)]
pub struct SqrtB {
    pub lambda: Mat<c64>,
    pub lambda_min_b: f64,
    /// Negative eigenvalues within tolerance were set to zero.
    pub clamped: bool,
}

/// `Lambda = V diag(sqrt(lambda)) V^H` from the eigendecomposition of `B`.
pub fn sqrt_b(bmat: &Mat<c64>, tol_psd: f64) -> Result<SqrtB> {
    let (vals, vecs) = eigh(bmat)?;
    let norm = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let lambda_min_b = vals[0];
    if lambda_min_b < -tol_psd * norm {
        return Err(Error::EnergyNotPositive(lambda_min_b));
    }
    let clamped = lambda_min_b < 0.0;
    let roots: Vec<f64> = vals.iter().map(|v| v.max(0.0).sqrt()).collect();
    let lambda = spectral_function(&vecs, &roots);
    Ok(SqrtB {
        lambda,
        lambda_min_b,
        clamped,
    })
}

/// `V diag(f) V^H`, symmetrized.
pub fn spectral_function(vecs: &Mat<c64>, f: &[f64]) -> Mat<c64> {
    let n = vecs.nrows();
    let scaled = Mat::<c64>::from_fn(n, vecs.ncols(), |i, j| vecs[(i, j)] * f[j]);
    let m = &scaled * vecs.adjoint();
    Mat::from_fn(n, n, |i, j| (m[(i, j)] + m[(j, i)].conj()) * 0.5)
}

/// Smallest eigenvalue of `W^{-1/2} B W^{-1/2}`, `W` the `X^1` Gram diagonal.
pub fn kappa_dense(bmat: &Mat<c64>, basis: &PlaneWaveBasis) -> Result<f64> {
    let w = basis.sobolev_weights();
    let gram: Vec<f64> = w.iter().chain(&w).copied().chain([1.0; 6]).collect();
    if gram.len() != bmat.nrows() {
        return Err(Error::Precondition("basis does not match the matrix size".into()));
    }
    let scaled = Mat::<c64>::from_fn(bmat.nrows(), bmat.ncols(), |i, j| {
        bmat[(i, j)] / (gram[i] * gram[j]).sqrt()
    });
    Ok(eigh(&scaled)?.0[0])
}

/// `K = Lambda (iJ) Lambda`.
pub fn build_k(lambda: &Mat<c64>, j: &SymplecticForm) -> Mat<c64> {
    let ij_lambda = j.mul_left(lambda);
    let ij_lambda = Mat::<c64>::from_fn(ij_lambda.nrows(), ij_lambda.ncols(), |r, c| {
        ij_lambda[(r, c)] * c64::new(0.0, 1.0)
    });
    lambda * &ij_lambda
}

/// Full eigendecomposition of a Hermitian `K`, ordered and phase-fixed.
/// The positivity constants are left as `NaN` for the caller to fill.
pub fn eig_k(k: &Mat<c64>, theta: [f64; 3]) -> Result<SpectralData> {
    let (vals, vecs) = eigh(k)?;
    let (omegas, vectors) = order_spectrum(&vals, &vecs);
    Ok(SpectralData {
        theta,
        omegas,
        vectors,
        lambda_min_b: f64::NAN,
        kappa: f64::NAN,
    })
}

/// Hausdorff distance between `eig(A)` and `{-i omega_k}`.
pub fn similarity_distance(amat: &Mat<c64>, omegas: &[f64]) -> Result<f64> {
    let ev = eigenvalues_general(amat)?;
    let target: Vec<c64> = omegas.iter().map(|&w| c64::new(0.0, -w)).collect();
    Ok(hausdorff(&ev, &target))
}

pub fn hausdorff(a: &[c64], b: &[c64]) -> f64 {
    let one_way = |x: &[c64], y: &[c64]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0f64, f64::max)
    };
    one_way(a, b).max(one_way(b, a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub k_lo: usize,
    pub k_hi: usize,
    /// Least-squares slope of `log|omega_k|` against `log k`.
    pub slope: f64,
    /// `exp` of the fitted intercept.
    pub prefactor: f64,
    /// `min_k |omega_k| / k^{2/3}` over the fit range.
    pub epsilon_q: f64,
    /// The moduli over the range are all equal.
    pub flat_spectrum: bool,
}

/// Fits `|omega_k| ~ C k^s` over `k_lo..=k_hi` (1-based, sorted by modulus).
pub fn growth_fit(omegas: &[f64], k_lo: usize, k_hi: usize) -> Result<GrowthFit> {
    if k_lo < 1 || k_hi < k_lo {
        return Err(Error::Precondition(format!("invalid fit range [{k_lo}, {k_hi}]")));
    }
    if 2 * k_hi > omegas.len() {
        return Err(Error::Precondition(format!(
            "k_hi = {k_hi} exceeds half the dimension {}",
            omegas.len()
        )));
    }
    let count = k_hi - k_lo + 1;
    if count < 10 {
        return Err(Error::RangeTooSmall(count));
    }
    let mut moduli: Vec<f64> = omegas.iter().map(|w| w.abs()).collect();
    moduli.sort_by(f64::total_cmp);
    let pts: Vec<(f64, f64)> = (k_lo..=k_hi)
        .map(|k| ((k as f64).ln(), moduli[k - 1].ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let epsilon_q = (k_lo..=k_hi)
        .map(|k| moduli[k - 1] / (k as f64).powf(2.0 / 3.0))
        .fold(f64::INFINITY, f64::min);
    let lo = moduli[k_lo - 1];
    let flat_spectrum = moduli[k_lo - 1..k_hi].iter().all(|&m| m == lo);
    Ok(GrowthFit {
        k_lo,
        k_hi,
        slope: if flat_spectrum { 0.0 } else { slope },
        prefactor: (my - slope * mx).exp(),
        epsilon_q,
        flat_spectrum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{AssemblyOptions, BlochOperatorSet};
    use crate::density::IonDensity;
    use crate::linalg::{hermiticity_defect, max_abs, max_abs_diff};
    use std::f64::consts::PI;

    fn real_diag(v: &[f64]) -> Mat<c64> {
        Mat::from_fn(v.len(), v.len(), |i, j| {
            if i == j {
                c64::new(v[i], 0.0)
            } else {
                c64::new(0.0, 0.0)
            }
        })
    }

    #[test]
    fn sqrt_of_diagonal() {
        let s = sqrt_b(&real_diag(&[4.0, 9.0]), TOL_PSD).unwrap();
        assert!(max_abs_diff(&s.lambda, &real_diag(&[2.0, 3.0])) < 1e-15);
        assert!(!s.clamped);
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        assert!(matches!(
            sqrt_b(&real_diag(&[1.0, -0.1]), TOL_PSD),
            Err(Error::EnergyNotPositive(_))
        ));
        let s = sqrt_b(&real_diag(&[1.0, -1e-13]), TOL_PSD).unwrap();
        assert!(s.clamped);
    }

    #[test]
    fn kappa_of_gram_is_one() {
        let basis = PlaneWaveBasis::new(1).unwrap();
        let w = basis.sobolev_weights();
        let gram: Vec<f64> = w.iter().chain(&w).copied().chain([1.0; 6]).collect();
        let k = kappa_dense(&real_diag(&gram), &basis).unwrap();
        assert!((k - 1.0).abs() < 1e-12);
        let scaled: Vec<f64> = gram.iter().map(|g| 3.0 * g).collect();
        assert!((kappa_dense(&real_diag(&scaled), &basis).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_toy() {
        let k = Mat::from_fn(2, 2, |i, j| if i == j { c64::new(0.0, 0.0) } else { c64::new(1.5, 0.0) });
        let s = eig_k(&k, [0.0; 3]).unwrap();
        assert_eq!(s.omegas.len(), 2);
        assert!((s.omegas[0] + 1.5).abs() < 1e-14 && (s.omegas[1] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn ordering_groups_ties_by_sign() {
        let omegas = [3.0, -1.0, 1.0 + 1e-15, -2.0, 0.5];
        let v = Mat::<c64>::identity(5, 5);
        let (sorted, vecs) = order_spectrum(&omegas, &v);
        assert_eq!(sorted, vec![0.5, -1.0, 1.0 + 1e-15, -2.0, 3.0]);
        assert_eq!(vecs[(1, 1)], c64::new(1.0, 0.0));
    }

    #[test]
    fn phase_anchor_makes_leading_entry_positive() {
        let v = [c64::new(0.0, 0.1), c64::new(0.0, -0.7), c64::new(0.7, 0.0)];
        let f = phase_anchor(&v);
        let lead = v[1] * f;
        assert!(lead.im.abs() < 1e-16 && lead.re > 0.0);
    }

    /// Decoupled ion sector: the 6x6 generator on `(q, p)` is
    /// `[[0, i T^{1/2} M^{-1/2}], [-i M^{-1/2} T^{1/2}, 0]]`, whose
    /// eigenvalues are `+-sqrt(t_i / M)`.
    #[test]
    fn decoupled_phonons_match_closed_form() {
        let d = IonDensity::sinc_gauss(0.05, 1.0, 2.0).unwrap().with_coupling_disabled();
        let basis = PlaneWaveBasis::new(1).unwrap();
        let theta = [0.9, 2.2, 4.0];
        let op = BlochOperatorSet::assemble(&d, theta, &basis, &AssemblyOptions::default()).unwrap();
        let s = sqrt_b(&op.bmat, TOL_PSD).unwrap();
        let k = build_k(&s.lambda, &op.j);
        let spec = eig_k(&k, theta).unwrap();
        let t = crate::density::projector_lattice_sum(&d, theta, -1.0, 8, false).terms.eigen();
        for &tv in &t.values {
            let w = (tv / 2.0).sqrt();
            for sign in [1.0, -1.0] {
                let best = spec
                    .omegas
                    .iter()
                    .map(|o| (o - sign * w).abs())
                    .fold(f64::INFINITY, f64::min);
                assert!(best < 1e-8, "{w}");
            }
        }
    }

    #[test]
    fn structural_identities_at_corner() {
        let d = IonDensity::sinc_gauss(0.05, 1.0, 1.0).unwrap();
        let basis = PlaneWaveBasis::new(1).unwrap();
        let op = BlochOperatorSet::assemble(&d, [PI; 3], &basis, &AssemblyOptions::default()).unwrap();
        let s = sqrt_b(&op.bmat, TOL_PSD).unwrap();
        let sq = &s.lambda * &s.lambda;
        assert!(max_abs_diff(&sq, &op.bmat) < 1e-9 * max_abs(&op.bmat));
        let k = build_k(&s.lambda, &op.j);
        assert!(hermiticity_defect(&k) < 1e-12 * max_abs(&k));
        let spec = eig_k(&k, op.theta).unwrap();
        let dist = similarity_distance(&op.amat(), &spec.omegas).unwrap();
        assert!(dist < 1e-7 * spec.max_abs_omega(), "{dist:e}");
        // orthonormality and residuals
        let gram = spec.vectors.adjoint() * &spec.vectors;
        assert!(max_abs_diff(&gram, &Mat::identity(op.dim(), op.dim())) < 1e-10);
        let kv = &k * &spec.vectors;
        for c in 0..op.dim() {
            for r in 0..op.dim() {
                let res = kv[(r, c)] - spec.vectors[(r, c)] * spec.omegas[c];
                assert!(res.norm() < 1e-9 * max_abs(&k));
            }
        }
    }

    #[test]
    fn energy_identity() {
        let d = IonDensity::sinc_gauss(0.05, 1.0, 1.0).unwrap();
        let basis = PlaneWaveBasis::new(1).unwrap();
        let op = BlochOperatorSet::assemble(&d, [1.0, 2.0, 3.0], &basis, &AssemblyOptions::default()).unwrap();
        let s = sqrt_b(&op.bmat, TOL_PSD).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let y: Vec<c64> = (0..op.dim())
                .map(|_| c64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let ly = crate::linalg::matvec(&s.lambda, &y);
            let lhs = crate::linalg::norm_sqr(&ly);
            let rhs = op.energy(&y);
            assert!((lhs - rhs).abs() < 1e-10 * rhs);
        }
    }

    #[test]
    fn growth_fit_weyl_toy() {
        // electron sector alone: frequencies |theta - 2 pi m|^2 / 2, twice
        let basis = PlaneWaveBasis::new(3).unwrap();
        let mut w: Vec<f64> = crate::assembly::assemble_h0([0.3, 1.2, 2.0], &basis);
        let neg: Vec<f64> = w.iter().map(|x| -x).collect();
        w.extend(neg);
        let fit = growth_fit(&w, 20, 150).unwrap();
        assert!((0.55..=0.80).contains(&fit.slope), "{}", fit.slope);
        assert!(fit.epsilon_q > 0.0);
    }

    #[test]
    fn growth_fit_errors_and_flat_flag() {
        let w = vec![2.0; 100];
        assert!(matches!(growth_fit(&w, 1, 5), Err(Error::RangeTooSmall(5))));
        assert!(growth_fit(&w, 1, 60).is_err());
        let fit = growth_fit(&w, 1, 40).unwrap();
        assert!(fit.flat_spectrum && fit.slope == 0.0);
    }

    #[test]
    fn unitary_propagation() {
        let k = Mat::from_fn(4, 4, |i, j| {
            c64::new((i + j) as f64, if i > j { 1.0 } else if i < j { -1.0 } else { 0.0 })
        });
        let spec = eig_k(&k, [0.0; 3]).unwrap();
        let z = vec![c64::new(1.0, 0.5); 4];
        for t in [1.0, 10.0, 100.0] {
            let zt = spec.propagate(&z, t);
            assert!((crate::linalg::norm(&zt) - crate::linalg::norm(&z)).abs() < 1e-10);
        }
    }
}
