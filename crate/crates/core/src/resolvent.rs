//! Fiberwise resolvent `(K - omega - i eps)^{-1}` and the spectral density
//! and limiting-absorption scans built on it.
//!
//! On a finite grid the spectrum of `K` is discrete, so `eps -> 0` has no
//! limit worth computing. Each `eps` is compared against a floor of twice
//! the local level spacing of the probe's bands; rows below it are kept
//! and flagged.

use std::io::Write;

use num_complex::Complex64 as c64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    bloch_inverse, check_source, flat_projection, is_zero, weighted_norm, BlochField, WeightedNormSpec,
};
use crate::error::{Error, Result};
use crate::grid::ThetaGrid;
use crate::linalg::{norm, norm_sqr, zeros};
use crate::report::fmt_f64;
use crate::sweep::{FlatBandReport, SpectraSource};

/// Eigen-coefficients below this fraction of the point norm are dropped
/// from the probe expansion.
const KEEP_TOL: f64 = 1e-14;

/// Terms lighter than this fraction of the heaviest one do not count
/// towards the band range or the level spacing.
const SUPPORT_TOL: f64 = 1e-12;

/// `1 / (omega_k - omega - i eps)`.
pub fn resolvent_multiplier(omega_k: f64, omega: f64, eps: f64) -> c64 {
    1.0 / c64::new(omega_k - omega, -eps)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps == 0.0 || !eps.is_finite() {
        return Err(Error::Precondition(format!("resolvent needs a finite eps != 0, got {eps}")));
    }
    Ok(())
}

/// `sum_k (omega_k - omega - i eps)^{-1} P_k z` at every grid point.
pub fn apply_resolvent(field: &BlochField, source: &dyn SpectraSource, omega: f64, eps: f64) -> Result<BlochField> {
    check_eps(eps)?;
    check_source(field, source)?;
    let values = field
        .values
        .par_iter()
        .enumerate()
        .map(|(p, v)| {
            if is_zero(v) {
                return Ok(zeros(v.len()));
            }
            let fiber = source.fiber(p)?;
            Ok(fiber
                .spectral
                .apply_function(v, |w| resolvent_multiplier(w, omega, eps)))
        })
        .collect::<Result<_>>()?;
    Ok(BlochField {
        grid: field.grid.clone(),
        dim: field.dim,
        values,
    })
}

/// Largest `|(K - omega - i eps) image - field|` over the grid, with `K`
/// applied blockwise rather than through its eigenvectors.
pub fn resolvent_residual(
    field: &BlochField,
    image: &BlochField,
    source: &dyn SpectraSource,
    omega: f64,
    eps: f64,
) -> Result<f64> {
    check_source(field, source)?;
    check_source(image, source)?;
    let shift = c64::new(omega, eps);
    let per_point: Vec<f64> = field
        .values
        .par_iter()
        .zip(&image.values)
        .enumerate()
        .map(|(p, (v, r))| {
            let fiber = source.fiber(p)?;
            let kr = fiber.apply_k(r);
            let res: Vec<c64> = kr
                .iter()
                .zip(r)
                .zip(v)
                .map(|((a, b), c)| a - shift * b - c)
                .collect();
            Ok(norm(&res))
        })
        .collect::<Result<_>>()?;
    Ok(per_point.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Debug)]
struct Term {
    column: usize,
    omega: f64,
    coef: c64,
    vector: Vec<c64>,
}

/// A test vector with its flat-band part removed, expanded once in the
/// eigenbases so that scans over `(omega, eps)` need no further solves.
#[derive(Clone, Debug)]
pub struct ResolventProbe {
    /// The probe itself, orthogonal to every flat-band column.
    pub field: BlochField,
    /// Range of the band values the probe lives on.
    pub window: [f64; 2],
    /// Strictly decreasing, positive.
    pub epsilons: Vec<f64>,
    omegas: Vec<Vec<f64>>,
    terms: Vec<Vec<Term>>,
}

impl ResolventProbe {
    pub fn new(
        field: &BlochField,
        source: &dyn SpectraSource,
        flat: &FlatBandReport,
        epsilons: Vec<f64>,
    ) -> Result<Self> {
        check_source(field, source)?;
        if flat.columns.len() != field.grid.len() {
            return Err(Error::GaugeMismatch("flat-band report from a different grid".into()));
        }
        check_epsilons(&epsilons)?;
        let per_point: Vec<(Vec<c64>, Vec<f64>, Vec<Term>)> = field
            .values
            .par_iter()
            .enumerate()
            .map(|(p, v)| {
                let fiber = source.fiber(p)?;
                let d = flat_projection(&fiber, &flat.columns[p], v);
                let c: Vec<c64> = v.iter().zip(&d).map(|(a, b)| a - b).collect();
                let total = norm_sqr(&c);
                let terms = if total == 0.0 {
                    Vec::new()
                } else {
                    fiber
                        .spectral
                        .coefficients(&c)
                        .into_iter()
                        .enumerate()
                        .filter(|(_, x)| x.norm_sqr() > KEEP_TOL * KEEP_TOL * total)
                        .map(|(k, coef)| Term {
                            column: k,
                            omega: fiber.omegas()[k],
                            coef,
                            vector: crate::linalg::column(&fiber.spectral.vectors, k),
                        })
                        .collect()
                };
                Ok((c, fiber.omegas().to_vec(), terms))
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(per_point.len());
        let mut omegas = Vec::with_capacity(per_point.len());
        let mut terms = Vec::with_capacity(per_point.len());
        for (c, w, t) in per_point {
            values.push(c);
            omegas.push(w);
            terms.push(t);
        }
        let mut probe = Self {
            field: BlochField {
                grid: field.grid.clone(),
                dim: field.dim,
                values,
            },
            window: [0.0, 0.0],
            epsilons,
            omegas,
            terms,
        };
        probe.window = probe.band_range();
        Ok(probe)
    }

    pub fn with_window(mut self, window: [f64; 2]) -> Result<Self> {
        if !(window[0] <= window[1]) {
            return Err(Error::Precondition(format!("empty omega window {window:?}")));
        }
        self.window = window;
        Ok(self)
    }

    pub fn grid(&self) -> &ThetaGrid {
        &self.field.grid
    }

    fn support(&self) -> impl Iterator<Item = (usize, &Term)> + '_ {
        let heaviest = self
            .terms
            .iter()
            .flatten()
            .map(|t| t.coef.norm_sqr())
            .fold(0.0, f64::max);
        self.terms
            .iter()
            .enumerate()
            .flat_map(|(p, ts)| ts.iter().map(move |t| (p, t)))
            .filter(move |(_, t)| t.coef.norm_sqr() >= SUPPORT_TOL * heaviest)
    }

    /// Smallest interval holding every band value the probe carries weight on.
    pub fn band_range(&self) -> [f64; 2] {
        let (lo, hi) = self
            .support()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, t)| {
                (lo.min(t.omega), hi.max(t.omega))
            });
        if lo > hi {
            [0.0, 0.0]
        } else {
            [lo, hi]
        }
    }

    /// `samples` uniform points over the window, ends included.
    pub fn omega_mesh(&self, samples: usize) -> Vec<f64> {
        let [a, b] = self.window;
        match samples {
            0 => Vec::new(),
            1 => vec![0.5 * (a + b)],
            n => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
        }
    }

    /// `Im <Z, R(omega + i eps) Z>
    ///  = L^{-3} sum_j sum_k eps / ((omega - omega_k)^2 + eps^2) |P_k Z_j|^2`.
    pub fn spectral_density(&self, omega: f64, eps: f64) -> Result<f64> {
        if !(eps > 0.0) {
            return Err(Error::Precondition(format!("spectral density needs eps > 0, got {eps}")));
        }
        let s: f64 = self
            .terms
            .iter()
            .map(|ts| {
                ts.iter()
                    .map(|t| eps / ((omega - t.omega).powi(2) + eps * eps) * t.coef.norm_sqr())
                    .sum::<f64>()
            })
            .sum();
        Ok(s / self.grid().len() as f64)
    }

    /// `<Z, R(omega + i eps) Z>` from the stored expansion.
    pub fn pairing(&self, omega: f64, eps: f64) -> Result<c64> {
        check_eps(eps)?;
        let s: c64 = self
            .terms
            .iter()
            .map(|ts| {
                ts.iter()
                    .map(|t| resolvent_multiplier(t.omega, omega, eps) * t.coef.norm_sqr())
                    .sum::<c64>()
            })
            .sum();
        Ok(s / self.grid().len() as f64)
    }

    /// `R(omega + i eps) Z` from the stored expansion.
    pub fn resolvent_image(&self, omega: f64, eps: f64) -> Result<BlochField> {
        check_eps(eps)?;
        let dim = self.field.dim;
        let values = self
            .terms
            .par_iter()
            .map(|ts| {
                let mut out = zeros(dim);
                for t in ts {
                    let a = resolvent_multiplier(t.omega, omega, eps) * t.coef;
                    for (o, x) in out.iter_mut().zip(&t.vector) {
                        *o += a * x;
                    }
                }
                out
            })
            .collect();
        Ok(BlochField {
            grid: self.grid().clone(),
            dim,
            values,
        })
    }

    /// Largest step of a probe-carrying band value to its grid neighbours,
    /// taken over the samples whose step brackets `omega`; over all samples
    /// when none does.
    pub fn level_spacing(&self, omega: f64) -> f64 {
        let grid = self.grid();
        let mut local: f64 = 0.0;
        let mut global: f64 = 0.0;
        for (p, t) in self.support() {
            let mut step: f64 = 0.0;
            for axis in 0..3 {
                for dir in [-1, 1] {
                    let q = grid.neighbor(p, axis, dir);
                    step = step.max((self.omegas[q][t.column] - t.omega).abs());
                }
            }
            global = global.max(step);
            if (t.omega - omega).abs() <= step {
                local = local.max(step);
            }
        }
        if local > 0.0 {
            local
        } else {
            global
        }
    }

    /// Smallest trusted `eps` at `omega`.
    pub fn epsilon_floor(&self, omega: f64) -> f64 {
        2.0 * self.level_spacing(omega)
    }

    pub fn check_epsilon(&self, omega: f64, eps: f64) -> Result<()> {
        let floor = self.epsilon_floor(omega);
        if eps < floor {
            return Err(Error::EpsilonBelowResolution { epsilon: eps, floor });
        }
        Ok(())
    }
}

fn check_epsilons(eps: &[f64]) -> Result<()> {
    if eps.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(Error::Precondition("epsilons must be positive".into()));
    }
    if eps.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Precondition("epsilons must be strictly decreasing".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LapRow {
    pub omega: f64,
    pub epsilon: f64,
    pub density: f64,
    /// `|||R(omega + i eps) Z|||_alpha`.
    pub weighted_norm: f64,
    pub trusted: bool,
}

/// Convergence statistics at one `omega` over its trusted rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LapStability {
    pub omega: f64,
    pub epsilon_floor: f64,
    pub trusted: usize,
    /// Extremes of `weighted_norm(eps_{i+1}) / weighted_norm(eps_i)`.
    pub min_ratio: Option<f64>,
    pub max_ratio: Option<f64>,
    pub density_sup: Option<f64>,
    /// Largest `|density(eps_{i+1}) / density(eps_i) - 1|`.
    pub density_change: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LapTable {
    pub alpha: f64,
    pub radius: usize,
    pub rows: Vec<LapRow>,
    pub stability: Vec<LapStability>,
}

impl LapTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "omega,epsilon,density,weighted_norm,trusted_flag")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_f64(r.omega),
                fmt_f64(r.epsilon),
                fmt_f64(r.density),
                fmt_f64(r.weighted_norm),
                u8::from(r.trusted)
            )?;
        }
        Ok(())
    }

    pub fn stability_at(&self, omega: f64) -> Option<&LapStability> {
        self.stability.iter().find(|s| s.omega == omega)
    }
}

/// Density and weighted resolvent norm for every `omega` and every probe
/// `eps`, inverted on the box of radius `radius`.
pub fn lap_scan(
    probe: &ResolventProbe,
    omegas: &[f64],
    spec: &WeightedNormSpec,
    radius: usize,
) -> Result<LapTable> {
    let l = probe.grid().l();
    if 4 * radius > l {
        return Err(Error::AliasingGuard { radius, l });
    }
    let mut rows = Vec::with_capacity(omegas.len() * probe.epsilons.len());
    let mut stability = Vec::with_capacity(omegas.len());
    for &omega in omegas {
        let floor = probe.epsilon_floor(omega);
        let first = rows.len();
        for &eps in &probe.epsilons {
            let cell = bloch_inverse(&probe.resolvent_image(omega, eps)?, radius)?;
            rows.push(LapRow {
                omega,
                epsilon: eps,
                density: probe.spectral_density(omega, eps)?,
                weighted_norm: weighted_norm(&cell, spec),
                trusted: eps >= floor,
            });
        }
        stability.push(stability_of(omega, floor, &rows[first..]));
    }
    Ok(LapTable {
        alpha: spec.alpha,
        radius,
        rows,
        stability,
    })
}

fn stability_of(omega: f64, floor: f64, rows: &[LapRow]) -> LapStability {
    let trusted: Vec<&LapRow> = rows.iter().filter(|r| r.trusted).collect();
    let ratios: Vec<f64> = trusted
        .windows(2)
        .map(|w| w[1].weighted_norm / w[0].weighted_norm)
        .collect();
    let fold = |v: &[f64], f: fn(f64, f64) -> f64| v.iter().copied().reduce(f);
    let densities: Vec<f64> = trusted.iter().map(|r| r.density).collect();
    let changes: Vec<f64> = densities
        .windows(2)
        .map(|w| if w[0] > 0.0 { (w[1] / w[0] - 1.0).abs() } else { 0.0 })
        .collect();
    LapStability {
        omega,
        epsilon_floor: floor,
        trusted: trusted.len(),
        min_ratio: fold(&ratios, f64::min),
        max_ratio: fold(&ratios, f64::max),
        density_sup: fold(&densities, f64::max),
        density_change: fold(&changes, f64::max),
    }
}
