//! Ion charge densities, given through their Fourier transform
//! `sigma_hat(xi) = \int e^{i xi x} sigma(x) dx`, and the structural checks on
//! them: charge normalization, the Jellium zeros at the dual lattice and the
//! Wiener positivity of the lattice sum `Sigma(theta)`.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use num_complex::Complex64 as c64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_off_lattice, ThetaGrid};
use crate::rank_one::ProjectorSum;
use crate::report::fmt_f64;

/// Relative tolerance on `sigma_hat(0) = e Z`.
pub const CHARGE_RTOL: f64 = 1e-12;
/// Last-shell Frobenius norm accepted for truncated lattice sums.
pub const SHELL_TOL: f64 = 1e-10;

/// One-dimensional profiles for separable densities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile1d {
    /// `sin(xi/2)/xi * exp(-gauss xi^2)`; vanishes at `2 pi Z \ {0}`.
    SincGauss { gauss: f64 },
}

impl Profile1d {
    pub fn eval(&self, xi: f64) -> f64 {
        match *self {
            Profile1d::SincGauss { gauss } => sinc_half(xi) * (-gauss * xi * xi).exp(),
        }
    }
}

/// `sin(x/2)/x`, with the Taylor branch near zero.
fn sinc_half(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        0.5 * (1.0 - x2 / 24.0 + x2 * x2 / 1920.0)
    } else {
        (0.5 * x).sin() / x
    }
}

/// Fourier samples on the cube `[-half h, half h]^3`, trilinearly
/// interpolated and zero outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabulatedDensity {
    step: f64,
    half: usize,
    samples: Vec<c64>,
}

impl TabulatedDensity {
    /// `samples` are ordered lexicographically over `(i1, i2, i3)`, each
    /// index running over `-half..=half`.
    pub fn new(step: f64, half: usize, samples: Vec<c64>) -> Result<Self> {
        let n = 2 * half + 1;
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::InvalidDensity(format!("table step {step} must be positive")));
        }
        if samples.len() != n * n * n {
            return Err(Error::InvalidDensity(format!(
                "table holds {} samples, expected {}",
                samples.len(),
                n * n * n
            )));
        }
        let t = Self {
            step,
            half,
            samples,
        };
        // sigma is real: sigma_hat(-xi) = conj(sigma_hat(xi))
        for (k, &s) in t.samples.iter().enumerate() {
            let mirror = t.samples[n * n * n - 1 - k];
            if (s - mirror.conj()).norm() > 1e-12 * s.norm().max(1.0) {
                return Err(Error::InvalidDensity(
                    "table violates sigma_hat(-xi) = conj(sigma_hat(xi))".into(),
                ));
            }
        }
        Ok(t)
    }

    /// Reads `xi1,xi2,xi3,re,im` rows (header optional) on a centred cubic
    /// grid.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut rows: Vec<[f64; 5]> = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(Error::InvalidDensity(format!(
                    "line {}: expected 5 columns",
                    lineno + 1
                )));
            }
            let parsed: std::result::Result<Vec<f64>, _> =
                fields.iter().map(|f| f.parse::<f64>()).collect();
            match parsed {
                Ok(v) => rows.push([v[0], v[1], v[2], v[3], v[4]]),
                Err(_) if rows.is_empty() && lineno == 0 => continue,
                Err(e) => {
                    return Err(Error::InvalidDensity(format!("line {}: {e}", lineno + 1)))
                }
            }
        }
        let n = (rows.len() as f64).cbrt().round() as usize;
        if n * n * n != rows.len() || n % 2 == 0 {
            return Err(Error::InvalidDensity(format!(
                "{} rows do not form an odd cubic grid",
                rows.len()
            )));
        }
        let half = n / 2;
        let step = rows.iter().map(|r| r[0]).fold(f64::NEG_INFINITY, f64::max) / half.max(1) as f64;
        let mut samples = vec![c64::new(0.0, 0.0); n * n * n];
        let mut filled = vec![false; n * n * n];
        for r in &rows {
            let mut idx = 0usize;
            for &x in &r[..3] {
                let i = (x / step).round() as i64 + half as i64;
                if i < 0 || i >= n as i64 || (x - (i - half as i64) as f64 * step).abs() > 1e-9 * step {
                    return Err(Error::InvalidDensity(format!("sample point {x} is off the grid")));
                }
                idx = idx * n + i as usize;
            }
            samples[idx] = c64::new(r[3], r[4]);
            filled[idx] = true;
        }
        if filled.iter().any(|f| !f) {
            return Err(Error::InvalidDensity("table has missing grid points".into()));
        }
        Self::new(step, half, samples)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            step: self.step,
            half: self.half,
            samples: self.samples.iter().map(|s| s * factor).collect(),
        }
    }

    pub fn eval(&self, xi: [f64; 3]) -> c64 {
        let n = 2 * self.half + 1;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let u = xi[a] / self.step + self.half as f64;
            if u < 0.0 || u > (n - 1) as f64 {
                return c64::new(0.0, 0.0);
            }
            let i = (u.floor() as usize).min(n.saturating_sub(2));
            base[a] = i;
            frac[a] = u - i as f64;
        }
        if n == 1 {
            return self.samples[0];
        }
        let mut acc = c64::new(0.0, 0.0);
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = 0;
            for a in 0..3 {
                let bit = (corner >> (2 - a)) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                idx = idx * n + base[a] + bit;
            }
            if w != 0.0 {
                acc += self.samples[idx] * w;
            }
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DensityKind {
    /// `amplitude * p(xi1) p(xi2) p(xi3)`.
    Separable { profile: Profile1d, amplitude: f64 },
    /// `amplitude * exp(-width^2 |xi|^2 / 4)`.
    IsotropicGaussian { width: f64, amplitude: f64 },
    Tabulated(TabulatedDensity),
}

impl DensityKind {
    pub fn eval(&self, xi: [f64; 3]) -> c64 {
        match self {
            DensityKind::Separable { profile, amplitude } => c64::new(
                amplitude * profile.eval(xi[0]) * profile.eval(xi[1]) * profile.eval(xi[2]),
                0.0,
            ),
            DensityKind::IsotropicGaussian { width, amplitude } => {
                let r2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
                c64::new(amplitude * (-width * width * r2 / 4.0).exp(), 0.0)
            }
            DensityKind::Tabulated(t) => t.eval(xi),
        }
    }
}

/// The ion density together with the charge constants and the ion mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IonDensity {
    kind: DensityKind,
    e: f64,
    z: f64,
    m_ion: f64,
    decay_rate: f64,
    coupled: bool,
}

impl IonDensity {
    /// Validates positivity of the constants and `sigma_hat(0) = e Z`.
    pub fn new(kind: DensityKind, e: f64, z: f64, m_ion: f64) -> Result<Self> {
        for (name, v) in [("e", e), ("Z", z), ("M_ion", m_ion)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidDensity(format!("{name} = {v} must be positive")));
            }
        }
        let sigma0 = kind.eval([0.0; 3]);
        if !(sigma0.re > 0.0) {
            return Err(Error::NonPositiveCharge(sigma0.re));
        }
        if sigma0.im.abs() > CHARGE_RTOL * sigma0.re {
            return Err(Error::InvalidDensity(format!("sigma_hat(0) = {sigma0} is not real")));
        }
        let ez = e * z;
        if (sigma0.re - ez).abs() > CHARGE_RTOL * ez {
            return Err(Error::ChargeMismatch {
                sigma0: sigma0.re,
                ez,
            });
        }
        Ok(Self {
            kind,
            e,
            z,
            m_ion,
            decay_rate: 1.0,
            coupled: true,
        })
    }

    /// Takes `Z = sigma_hat(0) / e`.
    pub fn normalized(kind: DensityKind, e: f64, m_ion: f64) -> Result<Self> {
        let sigma0 = kind.eval([0.0; 3]).re;
        if !(sigma0 > 0.0) {
            return Err(Error::NonPositiveCharge(sigma0));
        }
        Self::new(kind, e, sigma0 / e, m_ion)
    }

    /// The profile `sin(xi/2)/xi e^{-xi^2}` in every direction, `e = 1`,
    /// `M_ion = 1`, hence `Z = 1/8`.
    pub fn example() -> Self {
        Self::sinc_gauss(1.0, 1.0, 1.0).expect("example density is valid")
    }

    pub fn sinc_gauss(gauss: f64, e: f64, m_ion: f64) -> Result<Self> {
        Self::normalized(
            DensityKind::Separable {
                profile: Profile1d::SincGauss { gauss },
                amplitude: 1.0,
            },
            e,
            m_ion,
        )
    }

    /// `c exp(-w^2 |xi|^2/4)`; violates the Jellium condition.
    pub fn gaussian(width: f64, amplitude: f64, e: f64, m_ion: f64) -> Result<Self> {
        Self::normalized(DensityKind::IsotropicGaussian { width, amplitude }, e, m_ion)
    }

    pub fn with_decay_rate(mut self, rate: f64) -> Self {
        self.decay_rate = rate;
        self
    }

    /// The same density and charge with the ion-field coupling switched
    /// off: every coupling block built from `e` vanishes, the ion block
    /// `T` and the electron sector are kept.
    pub fn with_coupling_disabled(&self) -> Self {
        Self {
            coupled: false,
            ..self.clone()
        }
    }

    pub fn kind(&self) -> &DensityKind {
        &self.kind
    }

    pub fn e(&self) -> f64 {
        self.e
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn m_ion(&self) -> f64 {
        self.m_ion
    }

    pub fn decay_rate(&self) -> f64 {
        self.decay_rate
    }

    pub fn is_coupled(&self) -> bool {
        self.coupled
    }

    /// `e` as it enters the coupling blocks.
    pub fn coupling_e(&self) -> f64 {
        if self.coupled {
            self.e
        } else {
            0.0
        }
    }

    pub fn sigma_hat(&self, xi: [f64; 3]) -> c64 {
        self.kind.eval(xi)
    }
}

pub fn total_charge(d: &IonDensity) -> Result<f64> {
    let s = d.sigma_hat([0.0; 3]).re;
    if s <= 0.0 {
        return Err(Error::NonPositiveCharge(s));
    }
    Ok(s)
}

/// Integer points with `|m|_inf <= radius`, lexicographic.
pub fn lattice_points(radius: usize) -> impl Iterator<Item = [i32; 3]> {
    let r = radius as i32;
    (-r..=r).flat_map(move |a| (-r..=r).flat_map(move |b| (-r..=r).map(move |c| [a, b, c])))
}

pub fn sup_norm(m: [i32; 3]) -> usize {
    m.iter().map(|x| x.unsigned_abs() as usize).max().unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JelliumReport {
    pub passed: bool,
    pub radius: usize,
    pub tol: f64,
    pub worst_m: [i32; 3],
    pub worst_value: f64,
}

/// Scans `|sigma_hat(2 pi m)|` over `0 < |m|_inf <= radius`. Ties in the
/// worst offender go to the lexicographically largest `m`.
pub fn check_jellium(d: &IonDensity, radius: usize, tol: f64) -> Result<JelliumReport> {
    if radius < 1 {
        return Err(Error::Precondition("Jellium scan radius must be at least 1".into()));
    }
    let mut worst_m = [0; 3];
    let mut worst_value = -1.0;
    for m in lattice_points(radius).filter(|&m| m != [0, 0, 0]) {
        let xi = [2.0 * PI * m[0] as f64, 2.0 * PI * m[1] as f64, 2.0 * PI * m[2] as f64];
        let v = d.sigma_hat(xi).norm();
        if v >= worst_value {
            worst_value = v;
            worst_m = m;
        }
    }
    Ok(JelliumReport {
        passed: worst_value <= tol,
        radius,
        tol,
        worst_m,
        worst_value,
    })
}

/// A truncated lattice sum of projectors and the size of its outermost
/// shell.
#[derive(Clone, Debug)]
pub struct LatticeSum {
    pub terms: ProjectorSum,
    pub last_shell: f64,
    pub radius: usize,
}

impl LatticeSum {
    pub fn check_converged(&self) -> Result<()> {
        if !(self.last_shell < SHELL_TOL) {
            return Err(Error::TruncationNotConverged {
                radius: self.radius,
                last_shell: self.last_shell,
            });
        }
        Ok(())
    }
}

/// `sum_{|m|_inf <= radius} |sigma_hat(xi)|^2 xi xi^T / |xi|^2` over
/// `xi = 2 pi m + shift`, with `skip_zero` dropping `m = 0`. No convergence
/// check.
pub fn projector_lattice_sum(
    d: &IonDensity,
    shift: [f64; 3],
    sign: f64,
    radius: usize,
    skip_zero: bool,
) -> LatticeSum {
    let mut terms = ProjectorSum::with_capacity((2 * radius + 1).pow(3));
    let mut shell = [[0.0f64; 3]; 3];
    for m in lattice_points(radius) {
        if skip_zero && m == [0, 0, 0] {
            continue;
        }
        let xi = [
            2.0 * PI * m[0] as f64 + sign * shift[0],
            2.0 * PI * m[1] as f64 + sign * shift[1],
            2.0 * PI * m[2] as f64 + sign * shift[2],
        ];
        let w = d.sigma_hat(xi).norm_sqr();
        let r2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
        if w == 0.0 || r2 == 0.0 {
            continue;
        }
        terms.push(w, xi);
        if sup_norm(m) == radius {
            for i in 0..3 {
                for j in 0..3 {
                    shell[i][j] += w * xi[i] * xi[j] / r2;
                }
            }
        }
    }
    let last_shell = shell.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    LatticeSum {
        terms,
        last_shell,
        radius,
    }
}

/// The Wiener matrix `Sigma(theta)` as a projector sum, with the truncation
/// check applied.
pub fn wiener_terms(
    d: &IonDensity,
    theta: [f64; 3],
    radius: usize,
    delta_min: f64,
) -> Result<LatticeSum> {
    if radius < 1 {
        return Err(Error::Precondition("lattice-sum radius must be at least 1".into()));
    }
    check_off_lattice(theta, delta_min)?;
    let sum = projector_lattice_sum(d, theta, 1.0, radius, false);
    sum.check_converged()?;
    Ok(sum)
}

/// `Sigma(theta) = sum_m |sigma_hat(xi)|^2 xi xi^T / |xi|^2`, `xi = 2 pi m + theta`.
pub fn wiener_matrix(
    d: &IonDensity,
    theta: [f64; 3],
    radius: usize,
    delta_min: f64,
) -> Result<[[f64; 3]; 3]> {
    Ok(wiener_terms(d, theta, radius, delta_min)?.terms.matrix())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WienerReport {
    pub grid: Vec<[f64; 3]>,
    pub min_eig: Vec<f64>,
    pub passed: bool,
    pub truncation_radius: usize,
    pub tol: f64,
    /// Set when the grid was empty and `passed` holds vacuously.
    pub empty_grid: bool,
}

impl WienerReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "theta1,theta2,theta3,min_eig")?;
        for (t, m) in self.grid.iter().zip(&self.min_eig) {
            writeln!(w, "{},{},{},{}", fmt_f64(t[0]), fmt_f64(t[1]), fmt_f64(t[2]), fmt_f64(*m))?;
        }
        Ok(())
    }

    pub fn worst(&self) -> Option<(usize, f64)> {
        self.min_eig
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Smallest eigenvalue of `Sigma(theta)` at every grid point.
pub fn check_wiener(
    d: &IonDensity,
    points: &[[f64; 3]],
    radius: usize,
    tol: f64,
    delta_min: f64,
) -> Result<WienerReport> {
    let min_eig = points
        .par_iter()
        .map(|&theta| Ok(wiener_terms(d, theta, radius, delta_min)?.terms.lambda_min()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(WienerReport {
        grid: points.to_vec(),
        passed: min_eig.iter().all(|&m| m > tol),
        empty_grid: points.is_empty(),
        min_eig,
        truncation_radius: radius,
        tol,
    })
}

pub fn check_wiener_grid(
    d: &IonDensity,
    grid: &ThetaGrid,
    radius: usize,
    tol: f64,
    delta_min: f64,
) -> Result<WienerReport> {
    check_wiener(d, grid.points(), radius, tol, delta_min)
}
