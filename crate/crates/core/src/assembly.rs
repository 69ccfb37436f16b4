//! Fiber operators at a fixed quasimomentum: the diagonal blocks `H0` and
//! `G`, the coupling `S`, the ion block `T`, the energy matrix `B` and the
//! generator `A = J B`.

use std::io::{Read, Write};

use faer::Mat;
use num_complex::Complex64 as c64;
use serde::{Deserialize, Serialize};

use crate::basis::{Layout, PlaneWaveBasis};
use crate::density::{lattice_points, projector_lattice_sum, sup_norm, IonDensity};
use crate::error::{Error, Result};
use crate::grid::check_off_lattice;
use crate::rank_one::ProjectorSum;

pub const JELLIUM_T2_TOL: f64 = 1e-10;
/// Recorded in every output: the ion block is `T1 + T2` and the `O(e^4)`
/// remainder is not modelled.
pub const T_MODEL: &str = "T1+T2, O(e^4) dropped";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssemblyOptions {
    /// Lattice-sum truncation `|m|_inf <= radius` for the ion block.
    pub radius: usize,
    pub delta_min: f64,
    /// Assert `T2 = 0` and drop it.
    pub jellium: bool,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            radius: 8,
            delta_min: 1e-6,
            jellium: true,
        }
    }
}

/// Coefficients `sigma_hat(theta - 2 pi m)` of the periodized density.
pub fn zak_coefficients(d: &IonDensity, theta: [f64; 3], basis: &PlaneWaveBasis) -> Vec<c64> {
    basis
        .shifted_momenta(theta)
        .into_iter()
        .map(|xi| d.sigma_hat(xi))
        .collect()
}

fn norm_sqr3(x: [f64; 3]) -> f64 {
    x[0] * x[0] + x[1] * x[1] + x[2] * x[2]
}

/// Diagonal of `H0(theta)`: `|theta - 2 pi m|^2 / 2`.
pub fn assemble_h0(theta: [f64; 3], basis: &PlaneWaveBasis) -> Vec<f64> {
    basis
        .shifted_momenta(theta)
        .into_iter()
        .map(|xi| 0.5 * norm_sqr3(xi))
        .collect()
}

/// Diagonal of `G(theta)`: `1 / |theta - 2 pi m|^2`.
pub fn assemble_g(theta: [f64; 3], basis: &PlaneWaveBasis, delta_min: f64) -> Result<Vec<f64>> {
    check_off_lattice(theta, delta_min)?;
    Ok(basis
        .shifted_momenta(theta)
        .into_iter()
        .map(|xi| 1.0 / norm_sqr3(xi))
        .collect())
}

/// `S(theta)`, row `m`, column `j`: `e sqrt(Z) (-i xi_j) sigma_hat(xi) / |xi|^2`
/// with `xi = theta - 2 pi m`.
pub fn assemble_s(
    d: &IonDensity,
    theta: [f64; 3],
    basis: &PlaneWaveBasis,
    delta_min: f64,
) -> Result<Mat<c64>> {
    check_off_lattice(theta, delta_min)?;
    let pref = d.coupling_e() * d.z().sqrt();
    let xis = basis.shifted_momenta(theta);
    Ok(Mat::from_fn(basis.len(), 3, |m, j| {
        let xi = xis[m];
        let s = d.sigma_hat(xi);
        c64::new(0.0, -xi[j]) * s * (pref / norm_sqr3(xi))
    }))
}

/// The ion block and its parts.
#[derive(Clone, Debug)]
pub struct TBlock {
    pub t1: [[f64; 3]; 3],
    pub t2: [[f64; 3]; 3],
    pub t2_norm: f64,
    /// `T1 + T2`, or `T1` when the Jellium condition was asserted.
    pub t: [[f64; 3]; 3],
    pub t2_dropped: bool,
    pub radius: usize,
    pub last_shell: f64,
}

/// `T1(theta) = sum_m |sigma_hat(xi)|^2 xi xi^T/|xi|^2` at `xi = 2 pi m - theta`
/// and `T2 = -sum_{m != 0}` of the same at `xi = 2 pi m`.
pub fn assemble_t(d: &IonDensity, theta: [f64; 3], radius: usize, jellium: bool) -> Result<TBlock> {
    if radius < 1 {
        return Err(Error::Precondition("lattice-sum radius must be at least 1".into()));
    }
    let t1 = projector_lattice_sum(d, theta, -1.0, radius, false);
    t1.check_converged()?;
    let t2sum = projector_lattice_sum(d, [0.0; 3], 1.0, radius, true);
    let mut t2 = t2sum.terms.matrix();
    for row in t2.iter_mut() {
        for x in row.iter_mut() {
            *x = -*x;
        }
    }
    let t2_norm = frobenius(&t2);
    let t1m = t1.terms.matrix();
    if jellium {
        if !(t2_norm < JELLIUM_T2_TOL) {
            return Err(Error::JelliumViolation(t2_norm));
        }
        return Ok(TBlock {
            t1: t1m,
            t2,
            t2_norm,
            t: t1m,
            t2_dropped: true,
            radius,
            last_shell: t1.last_shell,
        });
    }
    t2sum.check_converged()?;
    let mut t = t1m;
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] += t2[i][j];
        }
    }
    Ok(TBlock {
        t1: t1m,
        t2,
        t2_norm,
        t,
        t2_dropped: false,
        radius,
        last_shell: t1.last_shell.max(t2sum.last_shell),
    })
}

pub fn frobenius(m: &[[f64; 3]; 3]) -> f64 {
    m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

/// The symplectic form `J` with blocks `[[0, I/2], [-I/2, 0]]` on the field
/// pair and `[[0, I], [-I, 0]]` on the ion pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SymplecticForm {
    pub layout: Layout,
}

impl SymplecticForm {
    pub fn to_dense(&self) -> Mat<f64> {
        let l = self.layout;
        let mut j = Mat::zeros(l.dim(), l.dim());
        for k in 0..l.b {
            j[(k, l.b + k)] = 0.5;
            j[(l.b + k, k)] = -0.5;
        }
        for k in 0..3 {
            j[(2 * l.b + k, 2 * l.b + 3 + k)] = 1.0;
            j[(2 * l.b + 3 + k, 2 * l.b + k)] = -1.0;
        }
        j
    }

    /// Row `i` of `J` has one nonzero: `(column, value)`.
    fn row(&self, i: usize) -> (usize, f64) {
        let b = self.layout.b;
        if i < b {
            (b + i, 0.5)
        } else if i < 2 * b {
            (i - b, -0.5)
        } else if i < 2 * b + 3 {
            (i + 3, 1.0)
        } else {
            (i - 3, -1.0)
        }
    }

    pub fn apply(&self, v: &[c64]) -> Vec<c64> {
        (0..self.layout.dim())
            .map(|i| {
                let (k, s) = self.row(i);
                v[k] * s
            })
            .collect()
    }

    /// `J M`; each entry is a single scaled entry of `M`, so the result
    /// equals the dense product exactly.
    pub fn mul_left(&self, m: &Mat<c64>) -> Mat<c64> {
        Mat::from_fn(m.nrows(), m.ncols(), |i, j| {
            let (k, s) = self.row(i);
            m[(k, j)] * s
        })
    }
}

/// All blocks at one quasimomentum.
#[derive(Clone, Debug)]
pub struct BlochOperatorSet {
    pub theta: [f64; 3],
    pub cutoff: usize,
    pub layout: Layout,
    /// `xi_m = theta - 2 pi m`.
    pub momenta: Vec<[f64; 3]>,
    pub h0: Vec<f64>,
    pub g: Vec<f64>,
    pub sigma: Vec<c64>,
    pub s: Mat<c64>,
    pub t: TBlock,
    pub bmat: Mat<c64>,
    pub j: SymplecticForm,
    /// `4 e^2 Z` with the coupling charge.
    pub coupling: f64,
    pub m_ion: f64,
    /// Terms of `T1` from lattice points outside the basis.
    pub ion_extra: ProjectorSum,
}

impl BlochOperatorSet {
    pub fn assemble(
        d: &IonDensity,
        theta: [f64; 3],
        basis: &PlaneWaveBasis,
        opts: &AssemblyOptions,
    ) -> Result<Self> {
        let h0 = assemble_h0(theta, basis);
        let g = assemble_g(theta, basis, opts.delta_min)?;
        let s = assemble_s(d, theta, basis, opts.delta_min)?;
        let t = assemble_t(d, theta, opts.radius, opts.jellium)?;
        let e = d.coupling_e();
        let coupling = 4.0 * e * e * d.z();
        let layout = basis.layout();
        let b = layout.b;
        let mut bmat = Mat::<c64>::zeros(layout.dim(), layout.dim());
        for k in 0..b {
            bmat[(k, k)] = c64::new(2.0 * h0[k] + coupling * g[k], 0.0);
            bmat[(b + k, b + k)] = c64::new(2.0 * h0[k], 0.0);
            for j in 0..3 {
                let v = s[(k, j)] * 2.0;
                bmat[(k, 2 * b + j)] = v;
                bmat[(2 * b + j, k)] = v.conj();
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                bmat[(2 * b + i, 2 * b + j)] = c64::new(t.t[i][j], 0.0);
            }
            bmat[(2 * b + 3 + i, 2 * b + 3 + i)] = c64::new(1.0 / d.m_ion(), 0.0);
        }
        let mut ion_extra = ProjectorSum::new();
        for m in lattice_points(opts.radius).filter(|&m| sup_norm(m) > basis.cutoff()) {
            let xi = [0, 1, 2].map(|a| 2.0 * std::f64::consts::PI * m[a] as f64 - theta[a]);
            ion_extra.push(d.sigma_hat(xi).norm_sqr(), xi);
        }
        Ok(Self {
            theta,
            cutoff: basis.cutoff(),
            layout,
            momenta: basis.shifted_momenta(theta),
            h0,
            g,
            sigma: zak_coefficients(d, theta, basis),
            s,
            t,
            bmat,
            j: SymplecticForm { layout },
            coupling,
            m_ion: d.m_ion(),
            ion_extra,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Diagonal of `G^{-1}`: `|theta - 2 pi m|^2`.
    pub fn ginv_diag(&self) -> Vec<f64> {
        self.momenta.iter().map(|&xi| norm_sqr3(xi)).collect()
    }

    /// `A = J B`.
    pub fn amat(&self) -> Mat<c64> {
        assemble_a(self)
    }

    /// The `(psi1, q)` block of `B`, size `B + 3`.
    pub fn c_block(&self) -> Mat<c64> {
        let l = self.layout;
        Mat::from_fn(l.half(), l.half(), |i, j| self.bmat[(l.c_index(i), l.c_index(j))])
    }

    /// Diagonal of the `(psi2, p)` block of `B`: `|xi_m|^2` then `1/M`.
    pub fn d_block(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.h0.iter().map(|h| 2.0 * h).collect();
        v.extend([1.0 / self.m_ion; 3]);
        v
    }

    /// `<B y, y>`.
    pub fn energy(&self, y: &[c64]) -> f64 {
        let by = crate::linalg::matvec(&self.bmat, y);
        crate::linalg::dot(y, &by).re
    }

    /// Writes `B` as `BLB1` header plus row-major complex128.
    pub fn write_blb1<W: Write>(&self, w: W) -> Result<()> {
        write_blb1(w, self.cutoff, self.theta, &self.bmat)
    }
}

pub fn assemble_a(opset: &BlochOperatorSet) -> Mat<c64> {
    opset.j.mul_left(&opset.bmat)
}

/// `A` filled block by block from its closed form. The coupling enters the
/// second block row with a minus sign, as the product `J B` requires.
pub fn transcribed_a(opset: &BlochOperatorSet) -> Mat<c64> {
    let l = opset.layout;
    let b = l.b;
    let mut a = Mat::<c64>::zeros(l.dim(), l.dim());
    let half_coupling = 0.5 * opset.coupling;
    for k in 0..b {
        a[(k, b + k)] = c64::new(opset.h0[k], 0.0);
        a[(b + k, k)] = c64::new(-opset.h0[k] - half_coupling * opset.g[k], 0.0);
        for j in 0..3 {
            a[(b + k, 2 * b + j)] = -opset.s[(k, j)];
            a[(2 * b + 3 + j, k)] = opset.s[(k, j)].conj() * -2.0;
        }
    }
    for i in 0..3 {
        a[(2 * b + i, 2 * b + 3 + i)] = c64::new(1.0 / opset.m_ion, 0.0);
        for j in 0..3 {
            a[(2 * b + 3 + i, 2 * b + j)] = c64::new(-opset.t.t[i][j], 0.0);
        }
    }
    a
}

const BLB1_MAGIC: &[u8; 4] = b"BLB1";

pub fn write_blb1<W: Write>(mut w: W, cutoff: usize, theta: [f64; 3], m: &Mat<c64>) -> Result<()> {
    let n = u16::try_from(cutoff).map_err(|_| Error::Precondition("cutoff too large".into()))?;
    let dim = u16::try_from(m.nrows()).map_err(|_| Error::Precondition("dimension too large".into()))?;
    let mut buf = Vec::with_capacity(32 + 16 * m.nrows() * m.ncols());
    buf.extend_from_slice(BLB1_MAGIC);
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    for t in theta {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].re.to_le_bytes());
            buf.extend_from_slice(&m[(i, j)].im.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a `BLB1` dump: `(N, theta, matrix)`.
pub fn read_blb1<R: Read>(mut r: R) -> Result<(usize, [f64; 3], Mat<c64>)> {
    let mut head = [0u8; 32];
    r.read_exact(&mut head)?;
    if &head[..4] != BLB1_MAGIC {
        return Err(Error::Io("not a BLB1 stream".into()));
    }
    let n = u16::from_le_bytes([head[4], head[5]]) as usize;
    let dim = u16::from_le_bytes([head[6], head[7]]) as usize;
    let f = |k: usize| f64::from_le_bytes(head[8 + 8 * k..16 + 8 * k].try_into().unwrap());
    let theta = [f(0), f(1), f(2)];
    let mut body = vec![0u8; 16 * dim * dim];
    r.read_exact(&mut body)?;
    let val = |k: usize| f64::from_le_bytes(body[8 * k..8 * k + 8].try_into().unwrap());
    let m = Mat::from_fn(dim, dim, |i, j| {
        let k = 2 * (i * dim + j);
        c64::new(val(k), val(k + 1))
    });
    Ok((n, theta, m))
}
