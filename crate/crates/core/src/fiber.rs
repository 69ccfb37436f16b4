//! Blockwise solver for one fiber.
//!
//! Reordering states as `c = (psi1, q)` and `d = (psi2, p)` makes `B`
//! block-diagonal, `B = B_c (+) B_d` with `B_d = diag(|xi|^2, 1/M)`, and
//! turns the generator into
//!
//! ```text
//! K = [[0, i C], [-i C^H, 0]],   C = Lambda_c E,   E = diag(|xi|/2, M^{-1/2}).
//! ```
//!
//! From a singular triple `C v_k = s_k u_k` come the two eigenpairs
//! `+s_k: (u_k, -i v_k)/sqrt 2` and `-s_k: (u_k, i v_k)/sqrt 2`. The right
//! vectors are the eigenvectors of `C^H C` and the left ones those of
//! `C C^H`, paired cluster by cluster.
//!
//! Three eigenvalues of `B_c`, and the three phonon frequencies, lie far
//! below the rounding level of the dense eigensolvers. Whenever the
//! reduction of [`crate::ion_sector`] applies, those eigenpairs are rebuilt
//! from it, both inside `Lambda_c` and in the soft singular triples.

use faer::Mat;
use num_complex::Complex64 as c64;
use serde::{Deserialize, Serialize};

use crate::assembly::{AssemblyOptions, BlochOperatorSet};
use crate::basis::{Layout, PlaneWaveBasis};
use crate::density::IonDensity;
use crate::error::{Error, Result};
use crate::ion_sector::{self, SectorScaling, SoftEigen};
use crate::linalg::{eigh, matvec, matvec_adjoint, svd};
use crate::spectral::{order_spectrum, spectral_function, SpectralData, TOL_PSD};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiberOptions {
    /// Negative eigenvalues of `B` above `-tol_psd |B|` are clamped to zero.
    pub tol_psd: f64,
}

impl Default for FiberOptions {
    fn default() -> Self {
        Self { tol_psd: TOL_PSD }
    }
}

/// Spectral data of `K(theta)` together with the blocks needed to apply
/// `Lambda`, `K` and the propagators without forming dense `D x D` products.
#[derive(Clone, Debug)]
pub struct Fiber {
    pub layout: Layout,
    pub spectral: SpectralData,
    b_c: Mat<c64>,
    lambda_c: Mat<c64>,
    /// `Lambda_d = diag(|xi|, M^{-1/2})`.
    lambda_d: Vec<f64>,
    e: Vec<f64>,
    u: Mat<c64>,
    v: Mat<c64>,
    s: Vec<f64>,
    /// `B_c` had negative eigenvalues within tolerance.
    pub clamped: bool,
    /// The soft values came from the ion-sector reduction.
    pub structured: bool,
}

impl Fiber {
    pub fn solve(op: &BlochOperatorSet, opts: &FiberOptions) -> Result<Self> {
        let layout = op.layout;
        let half = layout.half();
        let b_c = op.c_block();
        let d_diag = op.d_block();

        let (vals, vecs) = eigh(&b_c)?;
        let norm = vals
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(d_diag.iter().fold(0.0f64, |m, v| m.max(*v)));
        if vals[0] < -opts.tol_psd * norm {
            return Err(Error::EnergyNotPositive(vals[0]));
        }
        let clamped = vals[0] < 0.0;
        let lambda_d: Vec<f64> = d_diag.iter().map(|d| d.sqrt()).collect();

        let e: Vec<f64> = op
            .momenta
            .iter()
            .map(|&x| 0.5 * norm3(x))
            .chain([1.0 / op.m_ion.sqrt(); 3])
            .collect();
        let sobolev: Vec<f64> = op
            .momenta
            .iter()
            .map(|&x| {
                let m = [0, 1, 2].map(|a| op.theta[a] - x[a]);
                1.0 + norm3(m).powi(2)
            })
            .collect();
        let reduced = match (
            ion_sector::soft_eigenvalues(op, SectorScaling::Energy),
            ion_sector::soft_eigenvalues(op, SectorScaling::Kinetic),
            ion_sector::kappa(op, &sobolev),
        ) {
            (Some(en), Some(kin), Some(kap)) => Some((en, kin, kap)),
            _ => None,
        };
        let structured = reduced.is_some();
        let d_min = d_diag.iter().copied().fold(f64::INFINITY, f64::min);
        let (lambda_min_b, kappa) = match &reduced {
            Some((en, _, kap)) => (en.values[0].min(d_min), *kap),
            None => (vals[0].min(d_min), dense_kappa(&b_c, &d_diag, &sobolev)?),
        };
        if !(lambda_min_b > 0.0) && !clamped {
            return Err(Error::EnergyNotPositive(lambda_min_b));
        }

        // with the reduction, the soft part of Lambda_c is rebuilt from
        // exact eigenpairs; the dense ones are rounding noise there
        let mut basis_c = vecs;
        let mut roots: Vec<f64> = vals.iter().map(|v| v.max(0.0).sqrt()).collect();
        let x_soft = reduced.as_ref().map(|(en, _, _)| extend_soft(&b_c, en));
        if let (Some(xs), Some((en, _, _))) = (&x_soft, &reduced) {
            project_out(&mut basis_c, xs, 3..half);
            for i in 0..3 {
                for r in 0..half {
                    basis_c[(r, i)] = xs[(r, i)];
                }
                roots[i] = en.values[i].sqrt();
            }
        }
        let lambda_c = spectral_function(&basis_c, &roots);

        let c = Mat::<c64>::from_fn(half, half, |i, j| lambda_c[(i, j)] * e[j]);
        let (mu, mut v) = eigh(&(c.adjoint() * &c))?;
        let mut s: Vec<f64> = mu.iter().map(|x| x.max(0.0).sqrt()).collect();
        let cv = &c * &v;
        let (_, w) = eigh(&(&c * c.adjoint()))?;

        // left vectors from C C^H, paired with the right ones on each
        // cluster of equal singular values
        let top = mu[half - 1].abs();
        let n_soft = if structured {
            3
        } else {
            mu.iter().take_while(|&&m| m <= 1e-12 * top).count()
        };
        let mut u = Mat::<c64>::zeros(half, half);
        let mut start = 0;
        while start < half {
            let mut end = if start == 0 && n_soft > 0 { n_soft } else { start + 1 };
            while end < half && mu[end] - mu[end - 1] <= 1e-12 * top {
                end += 1;
            }
            pair_cluster(&w, &mut v, &cv, &mut u, &mut s, start..end, start < n_soft);
            start = end;
        }

        if let Some((_, kin, _)) = &reduced {
            let kinetic = Mat::<c64>::from_fn(half, half, |i, j| b_c[(i, j)] * (e[i] * e[j]));
            let vs = extend_soft(&kinetic, kin);
            let (us, ss) = soft_triples(&basis_c, &roots, &vs, kin, &e);
            project_out(&mut v, &vs, 3..half);
            project_out(&mut u, &us, 3..half);
            for k in 0..3 {
                for r in 0..half {
                    u[(r, k)] = us[(r, k)];
                    v[(r, k)] = vs[(r, k)];
                }
                s[k] = ss[k];
            }
        }

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let dim = layout.dim();
        let mut omegas = Vec::with_capacity(dim);
        let mut full = Mat::<c64>::zeros(dim, dim);
        for k in 0..half {
            for (col, sign) in [(2 * k, 1.0), (2 * k + 1, -1.0)] {
                omegas.push(sign * s[k]);
                for i in 0..half {
                    full[(layout.c_index(i), col)] = u[(i, k)] * h;
                    full[(layout.d_index(i), col)] = v[(i, k)] * c64::new(0.0, -sign * h);
                }
            }
        }
        let (omegas, vectors) = order_spectrum(&omegas, &full);
        Ok(Self {
            layout,
            spectral: SpectralData {
                theta: op.theta,
                omegas,
                vectors,
                lambda_min_b,
                kappa,
            },
            b_c,
            lambda_c,
            lambda_d,
            e,
            u,
            v,
            s,
            clamped,
            structured,
        })
    }

    pub fn theta(&self) -> [f64; 3] {
        self.spectral.theta
    }

    pub fn omegas(&self) -> &[f64] {
        &self.spectral.omegas
    }

    /// `Lambda y`.
    pub fn apply_lambda(&self, y: &[c64]) -> Vec<c64> {
        let (yc, yd) = self.layout.split(y);
        let zc = matvec(&self.lambda_c, &yc);
        let zd: Vec<c64> = yd.iter().zip(&self.lambda_d).map(|(x, l)| x * l).collect();
        self.layout.join(&zc, &zd)
    }

    /// `K z = Lambda (iJ) Lambda z`, from the blocks.
    pub fn apply_k(&self, z: &[c64]) -> Vec<c64> {
        let (zc, zd) = self.layout.split(z);
        let i = c64::new(0.0, 1.0);
        // C x = Lambda_c (E x) and C^H x = E (Lambda_c x)
        let ex: Vec<c64> = zd.iter().zip(&self.e).map(|(x, e)| x * e).collect();
        let top: Vec<c64> = matvec(&self.lambda_c, &ex).into_iter().map(|x| x * i).collect();
        let lz = matvec(&self.lambda_c, &zc);
        let bottom: Vec<c64> = lz.iter().zip(&self.e).map(|(x, e)| -x * e * i).collect();
        self.layout.join(&top, &bottom)
    }

    /// `<B y, y>`.
    pub fn energy(&self, y: &[c64]) -> f64 {
        let (yc, yd) = self.layout.split(y);
        let by = matvec(&self.b_c, &yc);
        let c: f64 = crate::linalg::dot(&yc, &by).re;
        let d: f64 = yd
            .iter()
            .zip(&self.lambda_d)
            .map(|(x, l)| x.norm_sqr() * l * l)
            .sum();
        c + d
    }

    /// `exp(-i K t) z`.
    pub fn propagate_z(&self, z: &[c64], t: f64) -> Vec<c64> {
        self.spectral.propagate(z, t)
    }

    /// `exp(t A) y`, equal to `Lambda^{-1} exp(-i K t) Lambda y`, evaluated
    /// through the second-order form of the generator so that `Lambda`
    /// is never inverted.
    pub fn propagate_y(&self, y: &[c64], t: f64) -> Vec<c64> {
        let (yc, yd) = self.layout.split(y);
        let x0: Vec<c64> = yc.iter().zip(&self.e).map(|(x, e)| x / e).collect();
        let p0: Vec<c64> = yd.iter().zip(&self.lambda_d).map(|(x, l)| x * l).collect();
        let a = matvec_adjoint(&self.v, &x0);
        let b = matvec_adjoint(&self.v, &p0);
        let mut pos = Vec::with_capacity(a.len());
        let mut vel = Vec::with_capacity(a.len());
        for k in 0..a.len() {
            let (sin, cos) = (self.s[k] * t).sin_cos();
            let sinc = if self.s[k] * t.abs() < 1e-8 { t } else { sin / self.s[k] };
            pos.push(a[k] * cos + b[k] * sinc);
            vel.push(-a[k] * (self.s[k] * sin) + b[k] * cos);
        }
        let yc: Vec<c64> = matvec(&self.v, &pos)
            .into_iter()
            .zip(&self.e)
            .map(|(x, e)| x * e)
            .collect();
        let yd: Vec<c64> = matvec(&self.v, &vel)
            .into_iter()
            .zip(&self.lambda_d)
            .map(|(x, l)| x / l)
            .collect();
        self.layout.join(&yc, &yd)
    }

    /// Singular values of `C`; the three soft ones first, the rest ascending.
    pub fn singular_values(&self) -> &[f64] {
        &self.s
    }

    pub fn left_vectors(&self) -> &Mat<c64> {
        &self.u
    }
}

/// Rotates the columns `range` of `w` and `v` so that `C` maps one onto the
/// other diagonally, writing the left vectors into `u`. Falls back to
/// `C v_k / s_k` when the two eigenbases disagree on the cluster.
fn pair_cluster(
    w: &Mat<c64>,
    v: &mut Mat<c64>,
    cv: &Mat<c64>,
    u: &mut Mat<c64>,
    s: &mut [f64],
    range: std::ops::Range<usize>,
    soft: bool,
) {
    let half = w.nrows();
    let (a, m) = (range.start, range.len());
    let small = Mat::<c64>::from_fn(m, m, |i, j| {
        (0..half).map(|r| w[(r, a + i)].conj() * cv[(r, a + j)]).sum()
    });
    let paired = if m == 1 {
        let x = small[(0, 0)];
        let one = Mat::<c64>::identity(1, 1);
        Some((Mat::from_fn(1, 1, |_, _| x / x.norm()), vec![x.norm()], one))
    } else {
        svd(&small).ok().map(|(p, sigma, q)| {
            // back to ascending order
            let rev = |x: &Mat<c64>| Mat::<c64>::from_fn(m, m, |i, j| x[(i, m - 1 - j)]);
            (rev(&p), sigma.into_iter().rev().collect::<Vec<_>>(), rev(&q))
        })
    };
    let expected: f64 = range.clone().map(|k| s[k] * s[k]).sum();
    let paired = paired.filter(|(_, sigma, _)| {
        let got: f64 = sigma.iter().map(|x| x * x).sum();
        soft || ((got - expected).abs() <= 1e-6 * expected && sigma.iter().all(|x| x.is_finite()))
    });
    match paired {
        Some((p, sigma, q)) => {
            let vq = Mat::<c64>::from_fn(half, m, |r, k| {
                (0..m).map(|j| v[(r, a + j)] * q[(j, k)]).sum()
            });
            for k in 0..m {
                for r in 0..half {
                    u[(r, a + k)] = (0..m).map(|i| w[(r, a + i)] * p[(i, k)]).sum();
                    v[(r, a + k)] = vq[(r, k)];
                }
                if soft {
                    s[a + k] = sigma[k];
                }
            }
        }
        None => {
            for k in range {
                let norm = (0..half).map(|r| cv[(r, k)].norm_sqr()).sum::<f64>().sqrt();
                for r in 0..half {
                    u[(r, k)] = cv[(r, k)] / norm;
                }
            }
        }
    }
}

/// Eigenvectors of a block `[[diag(delta), F], [F^H, T]]` from the ion
/// parts `q` of the reduction: the field part is `-(delta - lambda)^{-1} F q`.
/// Columns orthonormalized.
fn extend_soft(block: &Mat<c64>, soft: &SoftEigen) -> Mat<c64> {
    let half = block.nrows();
    let b = half - 3;
    let mut x = Mat::<c64>::zeros(half, 3);
    for i in 0..3 {
        let q = soft.ion_vectors[i];
        for m in 0..b {
            let f: c64 = (0..3).map(|j| block[(m, b + j)] * q[j]).sum();
            x[(m, i)] = -f / (block[(m, m)].re - soft.values[i]);
        }
        for j in 0..3 {
            x[(b + j, i)] = c64::new(q[j], 0.0);
        }
    }
    for i in 0..3 {
        for j in 0..i {
            let overlap: c64 = (0..half).map(|r| x[(r, j)].conj() * x[(r, i)]).sum();
            for r in 0..half {
                let xj = x[(r, j)];
                x[(r, i)] -= xj * overlap;
            }
        }
        let n = (0..half).map(|r| x[(r, i)].norm_sqr()).sum::<f64>().sqrt();
        for r in 0..half {
            x[(r, i)] /= n;
        }
    }
    x
}

/// Removes from the columns `range` of `a` their components along the
/// orthonormal columns of `q`.
fn project_out(a: &mut Mat<c64>, q: &Mat<c64>, range: std::ops::Range<usize>) {
    let n = a.nrows();
    for k in range {
        for i in 0..q.ncols() {
            let overlap: c64 = (0..n).map(|r| q[(r, i)].conj() * a[(r, k)]).sum();
            for r in 0..n {
                let qi = q[(r, i)];
                a[(r, k)] -= qi * overlap;
            }
        }
    }
}

/// Soft singular triples of `C = Lambda_c E`, given the eigenbasis of
/// `Lambda_c` with roots `sqrt(lambda_i)`. The right vectors and values come
/// from the kinetic reduction. The left vectors `u = C v / s` are expanded
/// in that eigenbasis, where `Lambda_c^2 E v = s^2 E^{-1} v` gives two exact
/// forms of each coefficient,
///
/// ```text
/// <x_i, u> = sqrt(lambda_i) <x_i, E v> / s = s <x_i, E^{-1} v> / sqrt(lambda_i),
/// ```
///
/// of which the one whose prefactor is at most one is taken.
fn soft_triples(basis_c: &Mat<c64>, roots: &[f64], vs: &Mat<c64>, kinetic: &SoftEigen, e: &[f64]) -> (Mat<c64>, [f64; 3]) {
    let half = vs.nrows();
    let s = kinetic.values.map(|x| x.max(0.0).sqrt());
    let mut u = Mat::<c64>::zeros(half, 3);
    for k in 0..3 {
        let ev: Vec<c64> = (0..half).map(|r| vs[(r, k)] * e[r]).collect();
        let einv_v: Vec<c64> = (0..half).map(|r| vs[(r, k)] / e[r]).collect();
        for i in 0..half {
            let coef = if roots[i] >= s[k] {
                let x: c64 = (0..half).map(|r| basis_c[(r, i)].conj() * einv_v[r]).sum();
                x * (s[k] / roots[i])
            } else {
                let x: c64 = (0..half).map(|r| basis_c[(r, i)].conj() * ev[r]).sum();
                x * (roots[i] / s[k])
            };
            for r in 0..half {
                u[(r, k)] += basis_c[(r, i)] * coef;
            }
        }
        let n = (0..half).map(|r| u[(r, k)].norm_sqr()).sum::<f64>().sqrt();
        for r in 0..half {
            u[(r, k)] /= n;
        }
    }
    (u, s)
}

fn dense_kappa(b_c: &Mat<c64>, d_diag: &[f64], sobolev: &[f64]) -> Result<f64> {
    let b = sobolev.len();
    let gram = |i: usize| if i < b { sobolev[i] } else { 1.0 };
    let scaled = Mat::<c64>::from_fn(b_c.nrows(), b_c.ncols(), |i, j| {
        b_c[(i, j)] / (gram(i) * gram(j)).sqrt()
    });
    let c = eigh(&scaled)?.0[0];
    Ok(d_diag
        .iter()
        .enumerate()
        .map(|(i, d)| d / gram(i))
        .fold(c, f64::min))
}

fn norm3(x: [f64; 3]) -> f64 {
    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// Everything needed to solve a fiber at any quasimomentum.
#[derive(Clone, Debug)]
pub struct FiberProblem {
    pub density: IonDensity,
    pub basis: PlaneWaveBasis,
    pub assembly: AssemblyOptions,
    pub fiber: FiberOptions,
}

impl FiberProblem {
    pub fn new(density: IonDensity, cutoff: usize) -> Result<Self> {
        Ok(Self {
            density,
            basis: PlaneWaveBasis::new(cutoff)?,
            assembly: AssemblyOptions::default(),
            fiber: FiberOptions::default(),
        })
    }

    pub fn operators(&self, theta: [f64; 3]) -> Result<BlochOperatorSet> {
        BlochOperatorSet::assemble(&self.density, theta, &self.basis, &self.assembly)
    }

    pub fn solve(&self, theta: [f64; 3]) -> Result<Fiber> {
        Fiber::solve(&self.operators(theta)?, &self.fiber)
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }
}
