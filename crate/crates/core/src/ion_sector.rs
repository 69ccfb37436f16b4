//! Accurate soft eigenvalues through the Schur complement onto the ion
//! displacements.
//!
//! The `(psi1, q)` block of the energy matrix, and its rescalings used for the
//! Sobolev-relative constant and the phonon branch, all have the shape
//!
//! ```text
//! [ diag(delta_m)   2 S / scale ]
//! [ 2 S^H / scale   tau T       ]
//! ```
//!
//! Eliminating the field block at a trial eigenvalue `lambda` gives a 3x3
//! matrix `F(lambda)` which, under the Jellium condition, is again a sum of
//! rank-one projectors with nonnegative weights
//!
//! ```text
//! F(lambda) = tau sum_m |sigma_hat(xi_m)|^2 (a_m - lambda c_m) / (a_m + g - lambda c_m) u_m u_m^T
//!           + tau (lattice terms outside the basis)
//! ```
//!
//! with `a_m = |xi_m|^4`, `g = 4 e^2 Z`, `u_m = xi_m / |xi_m|` and a
//! per-mode scale `c_m` that depends on the rescaling. The soft eigenvalues
//! solve `lambda = eig_i(F(lambda))`; each `F` is handled by
//! [`ProjectorSum`], so they keep full relative accuracy even when they are
//! thirty orders of magnitude below the norm of the matrix.

use crate::assembly::BlochOperatorSet;
use crate::rank_one::ProjectorSum;

/// Which congruence of the `(psi1, q)` block is reduced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SectorScaling<'a> {
    /// The block itself.
    Energy,
    /// `W^{-1/2} B W^{-1/2}` with field weights `w_m = 1 + |2 pi m|^2`.
    Sobolev(&'a [f64]),
    /// `E B E` with `E = diag(|xi_m|/2, M^{-1/2})`; its eigenvalues are the
    /// squared frequencies of the reduced generator.
    Kinetic,
}

/// The three soft eigenvalues (ascending) and the ion parts of their
/// eigenvectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftEigen {
    pub values: [f64; 3],
    pub ion_vectors: [[f64; 3]; 3],
    /// Upper end of the interval on which the reduction is valid; every
    /// other eigenvalue of the block lies at or above it.
    pub bound: f64,
}

/// `None` when the reduction does not apply: the ion block carries a
/// `T2` part, the lattice sum is shorter than the basis, or a soft
/// eigenvalue leaves the validity interval.
pub fn soft_eigenvalues(op: &BlochOperatorSet, scaling: SectorScaling<'_>) -> Option<SoftEigen> {
    if !op.t.t2_dropped || op.t.radius < op.cutoff {
        return None;
    }
    let b = op.layout.b;
    let g = op.coupling;
    let (tau, scale): (f64, Vec<f64>) = match scaling {
        SectorScaling::Energy => (1.0, op.momenta.iter().map(|&x| norm_sqr(x)).collect()),
        SectorScaling::Sobolev(w) => {
            assert_eq!(w.len(), b);
            (1.0, op.momenta.iter().zip(w).map(|(&x, wm)| wm * norm_sqr(x)).collect())
        }
        SectorScaling::Kinetic => (1.0 / op.m_ion, vec![4.0; b]),
    };
    let a: Vec<f64> = op.momenta.iter().map(|&x| norm_sqr(x) * norm_sqr(x)).collect();
    let weights: Vec<f64> = op.sigma.iter().map(|s| s.norm_sqr()).collect();
    // field diagonal of the rescaled block is (a + g) / c; interlacing puts
    // all but three eigenvalues above its minimum, and the weights stay
    // positive only below min a / c
    let bound = a
        .iter()
        .zip(&scale)
        .map(|(am, cm)| am / cm)
        .fold(f64::INFINITY, f64::min);

    let build = |lambda: f64| -> ProjectorSum {
        let mut f = ProjectorSum::with_capacity(b + op.ion_extra.len());
        for m in 0..b {
            if weights[m] == 0.0 {
                continue;
            }
            let num = a[m] - lambda * scale[m];
            let den = a[m] + g - lambda * scale[m];
            f.push(tau * weights[m] * num / den, op.momenta[m]);
        }
        f.extend_scaled(&op.ion_extra, tau);
        f
    };

    let mut values = [0.0f64; 3];
    let mut ion_vectors = [[0.0f64; 3]; 3];
    for i in 0..3 {
        let mut lambda = 0.0f64;
        let mut vec = [0.0f64; 3];
        let mut converged = false;
        for _ in 0..100 {
            let eig = build(lambda).eigen();
            let next = eig.values[i];
            vec = eig.vectors[i];
            if !(next < 0.5 * bound) {
                return None;
            }
            let done = (next - lambda).abs() <= 1e-15 * next.abs();
            lambda = next;
            if done {
                converged = true;
                break;
            }
        }
        if !converged {
            return None;
        }
        values[i] = lambda;
        ion_vectors[i] = vec;
    }
    Some(SoftEigen {
        values,
        ion_vectors,
        bound,
    })
}

/// Smallest eigenvalue of the full energy matrix.
pub fn lambda_min_b(op: &BlochOperatorSet) -> Option<f64> {
    let soft = soft_eigenvalues(op, SectorScaling::Energy)?;
    let rest = op.d_block().into_iter().fold(f64::INFINITY, f64::min);
    Some(soft.values[0].min(rest))
}

/// Largest `kappa` with `<B y, y> >= kappa |y|_{X^1}^2`.
pub fn kappa(op: &BlochOperatorSet, sobolev: &[f64]) -> Option<f64> {
    let soft = soft_eigenvalues(op, SectorScaling::Sobolev(sobolev))?;
    let d = op.d_block();
    let rest = d[..op.layout.b]
        .iter()
        .zip(sobolev)
        .map(|(x, w)| x / w)
        .chain(d[op.layout.b..].iter().copied())
        .fold(f64::INFINITY, f64::min);
    Some(soft.values[0].min(rest))
}

/// The three smallest frequencies of the reduced generator, ascending.
pub fn phonon_frequencies(op: &BlochOperatorSet) -> Option<[f64; 3]> {
    let soft = soft_eigenvalues(op, SectorScaling::Kinetic)?;
    Some(soft.values.map(f64::sqrt))
}

fn norm_sqr(x: [f64; 3]) -> f64 {
    x[0] * x[0] + x[1] * x[1] + x[2] * x[2]
}
