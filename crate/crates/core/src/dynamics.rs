//! Fields on the quasimomentum grid and in the cell representation, exact
//! evolution per fiber, flat/continuous splitting and weighted-norm decay.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64 as c64;
use rayon::prelude::*;
use rustfft::{FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fiber::Fiber;
use crate::grid::ThetaGrid;
use crate::linalg::{norm_sqr, zeros};
use crate::report::fmt_f64;
use crate::sweep::{FlatBandReport, SpectraSource};

/// One state per grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct BlochField {
    pub grid: ThetaGrid,
    pub dim: usize,
    pub values: Vec<Vec<c64>>,
}

impl BlochField {
    pub fn zeros(grid: &ThetaGrid, dim: usize) -> Self {
        Self {
            grid: grid.clone(),
            dim,
            values: vec![zeros(dim); grid.len()],
        }
    }

    pub fn from_fn(grid: &ThetaGrid, dim: usize, f: impl Fn(usize, [f64; 3]) -> Vec<c64> + Sync) -> Self {
        let values = grid
            .points()
            .par_iter()
            .enumerate()
            .map(|(i, &t)| {
                let v = f(i, t);
                assert_eq!(v.len(), dim);
                v
            })
            .collect();
        Self {
            grid: grid.clone(),
            dim,
            values,
        }
    }

    /// `sqrt(|Pi*|^{-1} sum_j w_j |values_j|^2)`.
    pub fn grid_norm(&self) -> f64 {
        let s: f64 = self.values.iter().map(|v| norm_sqr(v)).sum();
        (s / self.grid.len() as f64).sqrt()
    }

    /// `|Pi*|^{-1} sum_j w_j <self_j, other_j>`.
    pub fn inner(&self, other: &Self) -> c64 {
        let s: c64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| crate::linalg::dot(a, b))
            .sum();
        s / self.grid.len() as f64
    }

    pub fn scaled(&self, c: c64) -> Self {
        Self {
            grid: self.grid.clone(),
            dim: self.dim,
            values: self.values.iter().map(|v| v.iter().map(|x| x * c).collect()).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Self {
            grid: self.grid.clone(),
            dim: self.dim,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm()))
            .fold(0.0, f64::max)
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid || self.dim != other.dim {
            return Err(Error::GaugeMismatch("fields live on different grids or bases".into()));
        }
        Ok(())
    }
}

/// `Y(n)` for `n` in the box `{-R..R}^3`, lexicographic.
#[derive(Clone, Debug, PartialEq)]
pub struct CellField {
    pub radius: usize,
    pub dim: usize,
    pub cells: Vec<Vec<c64>>,
}

impl CellField {
    pub fn zeros(radius: usize, dim: usize) -> Self {
        let w = 2 * radius + 1;
        Self {
            radius,
            dim,
            cells: vec![zeros(dim); w * w * w],
        }
    }

    pub fn width(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn index(&self, n: [i32; 3]) -> Option<usize> {
        let r = self.radius as i32;
        if n.iter().any(|&x| x < -r || x > r) {
            return None;
        }
        let w = self.width() as i32;
        Some((((n[0] + r) * w + (n[1] + r)) * w + (n[2] + r)) as usize)
    }

    pub fn position(&self, idx: usize) -> [i32; 3] {
        let w = self.width();
        let r = self.radius as i32;
        [
            (idx / (w * w)) as i32 - r,
            ((idx / w) % w) as i32 - r,
            (idx % w) as i32 - r,
        ]
    }

    pub fn cell(&self, n: [i32; 3]) -> Option<&[c64]> {
        self.index(n).map(|i| self.cells[i].as_slice())
    }

    pub fn cell_mut(&mut self, n: [i32; 3]) -> Option<&mut Vec<c64>> {
        self.index(n).map(move |i| &mut self.cells[i])
    }

    pub fn x0_norm(&self) -> f64 {
        self.cells.iter().map(|c| norm_sqr(c)).sum::<f64>().sqrt()
    }

    /// Largest `|n|_inf` carrying a nonzero entry, `None` for the zero field.
    pub fn support_radius(&self) -> Option<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.iter().any(|x| *x != c64::new(0.0, 0.0)))
            .map(|(i, _)| self.position(i).iter().map(|x| x.unsigned_abs() as usize).max().unwrap_or(0))
            .max()
    }
}

/// Weight `(1 + |n|)^{2 alpha}` per cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedNormSpec {
    pub alpha: f64,
}

impl WeightedNormSpec {
    pub const DECAY_DEFAULT: f64 = -2.0;
    pub const LAP_DEFAULT: f64 = -4.0;

    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha < 0.0) {
            return Err(Error::Precondition(format!("weight exponent alpha = {alpha} must be negative")));
        }
        Ok(Self { alpha })
    }
}

impl Default for WeightedNormSpec {
    fn default() -> Self {
        Self {
            alpha: Self::DECAY_DEFAULT,
        }
    }
}

pub fn weighted_norm(cell: &CellField, spec: &WeightedNormSpec) -> f64 {
    cell.cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let n = cell.position(i);
            let r = ((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]) as f64).sqrt();
            (1.0 + r).powf(2.0 * spec.alpha) * norm_sqr(c)
        })
        .sum::<f64>()
        .sqrt()
}

/// Three-dimensional DFT over an `L^3` buffer in grid order, unnormalized.
fn fft3(buf: &mut [c64], l: usize, direction: FftDirection, planner: &mut FftPlanner<f64>) {
    let fft = planner.plan_fft(l, direction);
    let mut line = vec![c64::new(0.0, 0.0); l];
    for stride in [1, l, l * l] {
        for base in 0..l * l * l {
            // first element of each line along this axis
            if (base / stride) % l != 0 {
                continue;
            }
            for (k, x) in line.iter_mut().enumerate() {
                *x = buf[base + k * stride];
            }
            fft.process(&mut line);
            for (k, x) in line.iter().enumerate() {
                buf[base + k * stride] = *x;
            }
        }
    }
}

fn wrap(n: i32, l: usize) -> usize {
    n.rem_euclid(l as i32) as usize
}

/// `Y~(theta_j) = sum_n e^{i n . theta_j} Y(n)`.
pub fn bloch_forward(cell: &CellField, grid: &ThetaGrid) -> Result<BlochField> {
    let l = grid.l();
    if 2 * cell.radius + 1 > l {
        return Err(Error::AliasingGuard {
            radius: cell.radius,
            l,
        });
    }
    if let Some(s) = cell.support_radius() {
        if s >= cell.radius {
            return Err(Error::BoxTooSmall(cell.radius));
        }
    }
    let size = l * l * l;
    let columns: Vec<Vec<c64>> = (0..cell.dim)
        .into_par_iter()
        .map_init(FftPlanner::new, |planner, comp| {
            let mut buf = vec![c64::new(0.0, 0.0); size];
            for (i, c) in cell.cells.iter().enumerate() {
                let x = c[comp];
                if x == c64::new(0.0, 0.0) {
                    continue;
                }
                let n = cell.position(i);
                // theta_j = 2 pi (j + 1/2) / L: the half shift is a phase per cell
                let phase = c64::from_polar(1.0, PI * (n[0] + n[1] + n[2]) as f64 / l as f64);
                let j = (wrap(n[0], l) * l + wrap(n[1], l)) * l + wrap(n[2], l);
                buf[j] += x * phase;
            }
            fft3(&mut buf, l, FftDirection::Inverse, planner);
            buf
        })
        .collect();
    let values = (0..size)
        .map(|j| columns.iter().map(|col| col[j]).collect())
        .collect();
    Ok(BlochField {
        grid: grid.clone(),
        dim: cell.dim,
        values,
    })
}

/// `Y(n) = L^{-3} sum_j e^{-i n . theta_j} Y~(theta_j)` on the box of radius `R`.
pub fn bloch_inverse(field: &BlochField, radius: usize) -> Result<CellField> {
    let l = field.grid.l();
    if 4 * radius > l {
        return Err(Error::AliasingGuard { radius, l });
    }
    let size = l * l * l;
    let mut out = CellField::zeros(radius, field.dim);
    let positions: Vec<[i32; 3]> = (0..out.cells.len()).map(|i| out.position(i)).collect();
    let scale = 1.0 / size as f64;
    let columns: Vec<Vec<c64>> = (0..field.dim)
        .into_par_iter()
        .map_init(FftPlanner::new, |planner, comp| {
            let mut buf: Vec<c64> = field.values.iter().map(|v| v[comp]).collect();
            if buf.iter().all(|x| *x == c64::new(0.0, 0.0)) {
                return vec![c64::new(0.0, 0.0); positions.len()];
            }
            fft3(&mut buf, l, FftDirection::Forward, planner);
            positions
                .iter()
                .map(|n| {
                    let phase = c64::from_polar(scale, -PI * (n[0] + n[1] + n[2]) as f64 / l as f64);
                    buf[(wrap(n[0], l) * l + wrap(n[1], l)) * l + wrap(n[2], l)] * phase
                })
                .collect()
        })
        .collect();
    for (i, c) in out.cells.iter_mut().enumerate() {
        for (comp, col) in columns.iter().enumerate() {
            c[comp] = col[i];
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gauge {
    /// `Z = Lambda Y`, evolved by `exp(-i K t)`.
    Z,
    /// `Y`, evolved by `exp(t A)`.
    Y,
}

pub(crate) fn check_source(field: &BlochField, source: &dyn SpectraSource) -> Result<()> {
    if field.grid != *source.grid() {
        return Err(Error::GaugeMismatch("field and spectra use different grids".into()));
    }
    if field.dim != source.dim() {
        return Err(Error::GaugeMismatch(format!(
            "field dimension {} but spectra dimension {}",
            field.dim,
            source.dim()
        )));
    }
    Ok(())
}

pub(crate) fn is_zero(v: &[c64]) -> bool {
    v.iter().all(|x| *x == c64::new(0.0, 0.0))
}

fn propagate(fiber: &Fiber, v: &[c64], t: f64, gauge: Gauge) -> Vec<c64> {
    match gauge {
        Gauge::Z => fiber.propagate_z(v, t),
        Gauge::Y => fiber.propagate_y(v, t),
    }
}

/// The field at every requested time; each fiber is solved once and every
/// time is evolved from the initial data.
pub fn evolve_many(
    field: &BlochField,
    source: &dyn SpectraSource,
    times: &[f64],
    gauge: Gauge,
) -> Result<Vec<BlochField>> {
    check_source(field, source)?;
    let per_point: Vec<Vec<Vec<c64>>> = field
        .values
        .par_iter()
        .enumerate()
        .map(|(p, v)| {
            if is_zero(v) {
                return Ok(vec![v.clone(); times.len()]);
            }
            let fiber = source.fiber(p)?;
            Ok(times.iter().map(|&t| propagate(&fiber, v, t, gauge)).collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..times.len())
        .map(|k| BlochField {
            grid: field.grid.clone(),
            dim: field.dim,
            values: per_point.iter().map(|v| v[k].clone()).collect(),
        })
        .collect())
}

pub fn evolve(field: &BlochField, source: &dyn SpectraSource, t: f64, gauge: Gauge) -> Result<BlochField> {
    Ok(evolve_many(field, source, &[t], gauge)?.remove(0))
}

/// `sum_j w_j <B(theta_j) Y_j, Y_j> / |Pi*|`.
pub fn grid_energy(field: &BlochField, source: &dyn SpectraSource) -> Result<f64> {
    check_source(field, source)?;
    let parts: Vec<f64> = field
        .values
        .par_iter()
        .enumerate()
        .map(|(p, v)| {
            if is_zero(v) {
                return Ok(0.0);
            }
            Ok(source.fiber(p)?.energy(v))
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum::<f64>() / field.grid.len() as f64)
}

pub(crate) fn flat_projection(fiber: &Fiber, columns: &[usize], v: &[c64]) -> Vec<c64> {
    let mut out = zeros(v.len());
    for &c in columns {
        let col = fiber.spectral.vectors.col(c);
        let coef: c64 = (0..v.len()).map(|i| col[i].conj() * v[i]).sum();
        for (i, o) in out.iter_mut().enumerate() {
            *o += col[i] * coef;
        }
    }
    out
}

/// Projection onto the flat-band eigencolumns and its complement.
pub fn split_components(
    field: &BlochField,
    source: &dyn SpectraSource,
    flat: &FlatBandReport,
) -> Result<(BlochField, BlochField)> {
    check_source(field, source)?;
    if flat.columns.len() != field.grid.len() {
        return Err(Error::GaugeMismatch("flat-band report from a different grid".into()));
    }
    let parts: Vec<(Vec<c64>, Vec<c64>)> = field
        .values
        .par_iter()
        .enumerate()
        .map(|(p, v)| {
            if flat.columns[p].is_empty() || is_zero(v) {
                return Ok((zeros(v.len()), v.clone()));
            }
            let fiber = source.fiber(p)?;
            let d = flat_projection(&fiber, &flat.columns[p], v);
            let c = v.iter().zip(&d).map(|(a, b)| a - b).collect();
            Ok((d, c))
        })
        .collect::<Result<_>>()?;
    let (disc, cont): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let make = |values| BlochField {
        grid: field.grid.clone(),
        dim: field.dim,
        values,
    };
    Ok((make(disc), make(cont)))
}

/// Keeps the eigencomponents with `|omega_k| <= nu` at every point.
pub fn energy_filter(field: &BlochField, source: &dyn SpectraSource, nu: f64) -> Result<BlochField> {
    check_source(field, source)?;
    if nu.is_infinite() && nu > 0.0 {
        return Ok(field.clone());
    }
    let values = field
        .values
        .par_iter()
        .enumerate()
        .map(|(p, v)| {
            if is_zero(v) {
                return Ok(v.clone());
            }
            let fiber = source.fiber(p)?;
            let keep = |w: f64| if w.abs() <= nu { c64::new(1.0, 0.0) } else { c64::new(0.0, 0.0) };
            Ok(fiber.spectral.apply_function(v, keep))
        })
        .collect::<Result<_>>()?;
    Ok(BlochField {
        grid: field.grid.clone(),
        dim: field.dim,
        values,
    })
}

/// `exp(1 - 1/(1 - x^2))` on `|x| < 1`, zero outside; equals 1 at 0.
pub fn bump(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - x * x)).exp()
    }
}

/// Initial data concentrated on one band near a quasimomentum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialData {
    /// Column of the `|omega|` ordering.
    pub band: usize,
    pub center: [f64; 3],
    /// Half-width of the window per axis.
    pub width: f64,
    pub amplitude: f64,
}

impl Default for InitialData {
    fn default() -> Self {
        Self {
            band: 7,
            center: [PI; 3],
            width: PI,
            amplitude: 1.0,
        }
    }
}

impl InitialData {
    /// Product of bumps in the periodic distance to the center.
    pub fn window(&self, theta: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| {
                let d = theta[a] - self.center[a];
                let d = d - 2.0 * PI * (d / (2.0 * PI)).round();
                bump(d / self.width)
            })
            .product()
    }
}

/// `amplitude chi(theta) P_band(theta) (e_psi1 + e_psi2)/sqrt 2`, using the
/// `m = 0` field modes; zero off the window.
pub fn band_localized_field(source: &dyn SpectraSource, spec: &InitialData) -> Result<BlochField> {
    let grid = source.grid();
    let dim = source.dim();
    if spec.band >= dim {
        return Err(Error::Precondition(format!("band {} out of range", spec.band)));
    }
    if !(spec.width > 0.0) {
        return Err(Error::Precondition("window width must be positive".into()));
    }
    let b = (dim - 6) / 2;
    let zero_mode = b / 2;
    let values = grid
        .points()
        .par_iter()
        .enumerate()
        .map(|(p, &theta)| {
            let chi = spec.window(theta);
            if chi == 0.0 {
                return Ok(zeros(dim));
            }
            let fiber = source.fiber(p)?;
            let mut seed = zeros(dim);
            seed[zero_mode] = c64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
            seed[b + zero_mode] = c64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
            let proj = flat_projection(&fiber, &[spec.band], &seed);
            Ok(proj.into_iter().map(|x| x * (chi * spec.amplitude)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(BlochField {
        grid: grid.clone(),
        dim,
        values,
    })
}

/// Values of solver column `column` at every grid point.
pub fn sorted_band_values(source: &dyn SpectraSource, column: usize) -> Result<Vec<f64>> {
    (0..source.grid().len())
        .into_par_iter()
        .map(|p| Ok(source.fiber(p)?.omegas()[column]))
        .collect()
}

/// `c_horizon L / max |grad omega|`.
pub fn horizon(grid: &ThetaGrid, band_values: &[f64], c_horizon: f64) -> f64 {
    let speed = crate::sweep::finite_differences(grid, band_values)
        .0
        .iter()
        .map(|g| (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt())
        .fold(0.0, f64::max);
    if speed == 0.0 {
        f64::INFINITY
    } else {
        c_horizon * grid.l() as f64 / speed
    }
}

pub const C_HORIZON: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub t: f64,
    pub discrete_norm: f64,
    pub continuous_weighted_norm: f64,
    pub continuous_x0_norm: f64,
    /// `t` beyond the aliasing horizon.
    pub horizon_flag: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayTable {
    pub alpha: f64,
    pub radius: usize,
    pub t_max: f64,
    pub rows: Vec<DecayRow>,
    /// Largest deviation of the trusted weighted norms from their best
    /// nonincreasing fit, relative to the first value.
    pub monotone_deviation: f64,
}

impl DecayTable {
    pub fn last_trusted(&self) -> Option<&DecayRow> {
        self.rows.iter().filter(|r| !r.horizon_flag).max_by(|a, b| a.t.total_cmp(&b.t))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,discrete_norm,continuous_weighted_norm,continuous_x0_norm,horizon_flag")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_f64(r.t),
                fmt_f64(r.discrete_norm),
                fmt_f64(r.continuous_weighted_norm),
                fmt_f64(r.continuous_x0_norm),
                u8::from(r.horizon_flag)
            )?;
        }
        Ok(())
    }
}

/// Best nonincreasing least-squares fit (pool adjacent violators).
pub fn nonincreasing_fit(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a >= b {
                break;
            }
            blocks.pop();
            let last = blocks.len() - 1;
            blocks[last] = ((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb);
        }
    }
    blocks.into_iter().flat_map(|(v, n)| std::iter::repeat_n(v, n)).collect()
}

/// Norms of the flat and continuous parts of the evolved data at each time.
pub fn decay_curve(
    initial: &BlochField,
    source: &dyn SpectraSource,
    flat: &FlatBandReport,
    times: &[f64],
    spec: &WeightedNormSpec,
    radius: usize,
    t_max: f64,
) -> Result<DecayTable> {
    check_source(initial, source)?;
    let l = initial.grid.l();
    if 4 * radius > l {
        return Err(Error::AliasingGuard { radius, l });
    }
    let per_point: Vec<(Vec<f64>, Vec<Vec<c64>>)> = initial
        .values
        .par_iter()
        .enumerate()
        .map(|(p, v)| {
            if is_zero(v) {
                return Ok((vec![0.0; times.len()], vec![zeros(v.len()); times.len()]));
            }
            let fiber: Arc<Fiber> = source.fiber(p)?;
            let d = flat_projection(&fiber, &flat.columns[p], v);
            let c: Vec<c64> = v.iter().zip(&d).map(|(a, b)| a - b).collect();
            let disc = times.iter().map(|&t| norm_sqr(&fiber.propagate_z(&d, t))).collect();
            let cont = times.iter().map(|&t| fiber.propagate_z(&c, t)).collect();
            Ok((disc, cont))
        })
        .collect::<Result<_>>()?;
    let n = initial.grid.len() as f64;
    let mut rows = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let field = BlochField {
            grid: initial.grid.clone(),
            dim: initial.dim,
            values: per_point.iter().map(|(_, c)| c[k].clone()).collect(),
        };
        let cell = bloch_inverse(&field, radius)?;
        rows.push(DecayRow {
            t,
            discrete_norm: (per_point.iter().map(|(d, _)| d[k]).sum::<f64>() / n).sqrt(),
            continuous_weighted_norm: weighted_norm(&cell, spec),
            continuous_x0_norm: field.grid_norm(),
            horizon_flag: t > t_max,
        });
    }
    let trusted: Vec<f64> = rows
        .iter()
        .filter(|r| !r.horizon_flag)
        .map(|r| r.continuous_weighted_norm)
        .collect();
    let fit = nonincreasing_fit(&trusted);
    let monotone_deviation = match trusted.first() {
        Some(&y0) if y0 > 0.0 => {
            trusted.iter().zip(&fit).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / y0
        }
        _ => 0.0,
    };
    Ok(DecayTable {
        alpha: spec.alpha,
        radius,
        t_max,
        rows,
        monotone_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::IonDensity;
    use crate::fiber::FiberProblem;
    use crate::sweep::{LazySpectra, StoredSpectra};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cell(rng: &mut ChaCha8Rng, radius: usize, support: i32, dim: usize) -> CellField {
        let mut c = CellField::zeros(radius, dim);
        for i in 0..c.cells.len() {
            let n = c.position(i);
            if n.iter().all(|x| x.abs() <= support) {
                c.cells[i] = (0..dim)
                    .map(|_| c64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                    .collect();
            }
        }
        c
    }

    fn max_diff(a: &CellField, b: &CellField) -> f64 {
        a.cells
            .iter()
            .zip(&b.cells)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).norm()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn delta_at_origin_is_flat_in_theta() {
        let grid = ThetaGrid::new(4).unwrap();
        let mut c = CellField::zeros(1, 3);
        let v = vec![c64::new(1.0, 2.0), c64::new(0.0, -1.0), c64::new(3.0, 0.5)];
        *c.cell_mut([0, 0, 0]).unwrap() = v.clone();
        let f = bloch_forward(&c, &grid).unwrap();
        for val in &f.values {
            for (a, b) in val.iter().zip(&v) {
                assert!((a - b).norm() < 1e-14);
            }
        }
        let back = bloch_inverse(&f, 1).unwrap();
        assert!(max_diff(&back, &c) < 1e-14);
    }

    #[test]
    fn forward_matches_direct_sum_and_roundtrips() {
        let grid = ThetaGrid::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_cell(&mut rng, 2, 1, 4);
        let f = bloch_forward(&c, &grid).unwrap();
        for (j, theta) in grid.points().iter().enumerate().step_by(37) {
            let mut want = zeros(4);
            for (i, cell) in c.cells.iter().enumerate() {
                let n = c.position(i);
                let ph = c64::from_polar(1.0, (0..3).map(|a| n[a] as f64 * theta[a]).sum());
                for (w, x) in want.iter_mut().zip(cell) {
                    *w += x * ph;
                }
            }
            for (a, b) in f.values[j].iter().zip(&want) {
                assert!((a - b).norm() < 1e-12);
            }
        }
        let back = bloch_inverse(&f, 2).unwrap();
        assert!(max_diff(&back, &c) < 1e-10);
    }

    #[test]
    fn translation_multiplies_by_phase() {
        let grid = ThetaGrid::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_cell(&mut rng, 2, 0, 2);
        let mut shifted = CellField::zeros(2, 2);
        *shifted.cell_mut([1, 0, 0]).unwrap() = c.cell([0, 0, 0]).unwrap().to_vec();
        let a = bloch_forward(&c, &grid).unwrap();
        let b = bloch_forward(&shifted, &grid).unwrap();
        for (j, theta) in grid.points().iter().enumerate() {
            let ph = c64::from_polar(1.0, theta[0]);
            for (x, y) in a.values[j].iter().zip(&b.values[j]) {
                assert!((x * ph - y).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn constant_field_is_a_delta() {
        let grid = ThetaGrid::new(4).unwrap();
        let f = BlochField::from_fn(&grid, 3, |_, _| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            (0..3).map(|_| c64::new(r.random_range(-1.0..1.0), 0.0)).collect()
        });
        let cell = bloch_inverse(&f, 1).unwrap();
        // the constant field is a delta at the origin
        assert!((cell.x0_norm() - f.grid_norm()).abs() < 1e-13);
        assert_eq!(cell.support_radius(), Some(0));
    }

    #[test]
    fn smooth_bump_decays_fast_in_cells() {
        let grid = ThetaGrid::new(16).unwrap();
        let spec = InitialData {
            band: 0,
            center: [PI; 3],
            width: PI,
            amplitude: 1.0,
        };
        let f = BlochField::from_fn(&grid, 1, |_, t| vec![c64::new(spec.window(t), 0.0)]);
        let cell = bloch_inverse(&f, 4).unwrap();
        let at = |k: i32| cell.cell([k, 0, 0]).unwrap()[0].norm();
        assert!(at(4) < 1e-3 * at(0));
        // faster than (1 + |n|)^{-3}
        let scaled: Vec<f64> = (1..5).map(|k| at(k) * (1.0 + k as f64).powi(3)).collect();
        assert!(scaled.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn guards() {
        let grid = ThetaGrid::new(4).unwrap();
        let f = BlochField::zeros(&grid, 2);
        assert!(matches!(bloch_inverse(&f, 2), Err(Error::AliasingGuard { .. })));
        let mut c = CellField::zeros(1, 1);
        c.cell_mut([1, 0, 0]).unwrap()[0] = c64::new(1.0, 0.0);
        assert!(matches!(bloch_forward(&c, &ThetaGrid::new(8).unwrap()), Err(Error::BoxTooSmall(1))));
        let c = CellField::zeros(3, 1);
        assert!(matches!(bloch_forward(&c, &grid), Err(Error::AliasingGuard { .. })));
    }

    #[test]
    fn weighted_norm_examples() {
        let v = vec![c64::new(3.0, 4.0)];
        let mut c = CellField::zeros(3, 1);
        *c.cell_mut([0, 0, 0]).unwrap() = v.clone();
        assert!((weighted_norm(&c, &WeightedNormSpec::default()) - 5.0).abs() < 1e-15);
        let mut c = CellField::zeros(3, 1);
        *c.cell_mut([3, 0, 0]).unwrap() = v;
        assert!((weighted_norm(&c, &WeightedNormSpec::new(-2.0).unwrap()) - 5.0 / 16.0).abs() < 1e-15);
        assert!((weighted_norm(&c, &WeightedNormSpec { alpha: 0.0 }) - c.x0_norm()).abs() < 1e-15);
        assert!(WeightedNormSpec::new(0.0).is_err());
    }

    #[test]
    fn isotonic_fit() {
        assert_eq!(nonincreasing_fit(&[3.0, 2.0, 1.0]), vec![3.0, 2.0, 1.0]);
        assert_eq!(nonincreasing_fit(&[1.0, 3.0]), vec![2.0, 2.0]);
        assert_eq!(nonincreasing_fit(&[4.0, 1.0, 2.0, 0.0]), vec![4.0, 1.5, 1.5, 0.0]);
        assert!(nonincreasing_fit(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn isotonic_fit_is_nonincreasing(y in proptest::collection::vec(-10.0f64..10.0, 1..30)) {
            let f = nonincreasing_fit(&y);
            prop_assert_eq!(f.len(), y.len());
            for k in 1..f.len() {
                prop_assert!(f[k] <= f[k - 1] + 1e-12);
            }
            let sy: f64 = y.iter().sum();
            let sf: f64 = f.iter().sum();
            prop_assert!((sy - sf).abs() < 1e-9);
        }
    }

    fn small_source() -> StoredSpectra {
        let p = FiberProblem::new(IonDensity::example(), 1).unwrap();
        StoredSpectra::solve(&p, &ThetaGrid::new(4).unwrap()).unwrap()
    }

    fn random_field(source: &dyn SpectraSource, seed: u64) -> BlochField {
        BlochField::from_fn(source.grid(), source.dim(), |p, _| {
            let mut r = ChaCha8Rng::seed_from_u64(seed * 1000 + p as u64);
            (0..source.dim())
                .map(|_| c64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
                .collect()
        })
    }

    #[test]
    fn evolution_identity_unitarity_and_group_law() {
        let s = small_source();
        let f = random_field(&s, 1);
        let at0 = evolve(&f, &s, 0.0, Gauge::Z).unwrap();
        let d0 = at0.max_abs_diff(&f);
        assert!(d0 < 1e-10, "{d0:e}");
        let many = evolve_many(&f, &s, &[1.0, 10.0, 100.0], Gauge::Z).unwrap();
        for g in &many {
            for (a, b) in g.values.iter().zip(&f.values) {
                assert!((norm_sqr(a) - norm_sqr(b)).abs() < 1e-10 * norm_sqr(b));
            }
        }
        let two = evolve(&evolve(&f, &s, 0.3, Gauge::Z).unwrap(), &s, 1.1, Gauge::Z).unwrap();
        let one = evolve(&f, &s, 1.4, Gauge::Z).unwrap();
        assert!(two.max_abs_diff(&one) < 1e-9);
    }

    #[test]
    fn energy_filter_splits_the_spectrum() {
        let s = small_source();
        let f = random_field(&s, 9);
        assert_eq!(energy_filter(&f, &s, f64::INFINITY).unwrap(), f);
        let low = energy_filter(&f, &s, 3.0).unwrap();
        let high = f.add(&low.scaled(c64::new(-1.0, 0.0))).unwrap();
        assert!(low.inner(&high).norm() < 1e-12 * f.grid_norm().powi(2));
        assert!(energy_filter(&low, &s, 3.0).unwrap().max_abs_diff(&low) < 1e-12);
        for (p, v) in low.values.iter().enumerate() {
            let fiber = s.fiber(p).unwrap();
            let coef = fiber.spectral.coefficients(v);
            for (c, w) in coef.iter().zip(fiber.omegas()) {
                if w.abs() > 3.0 {
                    assert!(c.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn y_gauge_energy_constant() {
        let s = small_source();
        let f = random_field(&s, 2);
        let e0 = grid_energy(&f, &s).unwrap();
        for g in evolve_many(&f, &s, &[1.0, 10.0, 100.0], Gauge::Y).unwrap() {
            assert!((grid_energy(&g, &s).unwrap() - e0).abs() < 1e-9 * e0);
        }
    }

    #[test]
    fn mismatched_grid_rejected() {
        let s = small_source();
        let f = BlochField::zeros(&ThetaGrid::new(2).unwrap(), s.dim());
        assert!(matches!(evolve(&f, &s, 1.0, Gauge::Z), Err(Error::GaugeMismatch(_))));
    }

    #[test]
    fn split_without_flat_bands_is_trivial_and_idempotent() {
        let s = small_source();
        let f = random_field(&s, 3);
        let none = FlatBandReport::empty(s.grid().len());
        let (d, c) = split_components(&f, &s, &none).unwrap();
        assert!(d.values.iter().all(|v| is_zero(v)));
        assert_eq!(c, f);

        let mut flat = FlatBandReport::empty(s.grid().len());
        flat.columns = vec![vec![8, 9]; s.grid().len()];
        let (d, c) = split_components(&f, &s, &flat).unwrap();
        assert!(d.add(&c).unwrap().max_abs_diff(&f) < 1e-13);
        let (dd, dc) = split_components(&d, &s, &flat).unwrap();
        assert!(dd.max_abs_diff(&d) < 1e-12);
        assert!(dc.values.iter().flatten().all(|x| x.norm() < 1e-12));
        // the flat part evolves by phases only
        let n0 = d.grid_norm();
        for g in evolve_many(&d, &s, &[1.0, 5.0], Gauge::Z).unwrap() {
            assert!((g.grid_norm() - n0).abs() < 1e-10 * n0);
        }
    }

    #[test]
    fn band_field_lives_on_one_band() {
        let s = small_source();
        let spec = InitialData {
            band: 7,
            ..InitialData::default()
        };
        let f = band_localized_field(&s, &spec).unwrap();
        assert!(f.grid_norm() > 0.0);
        for (p, v) in f.values.iter().enumerate() {
            if is_zero(v) {
                continue;
            }
            let coef = s.fiber(p).unwrap().spectral.coefficients(v);
            let off: f64 = coef.iter().enumerate().filter(|(k, _)| *k != 7).map(|(_, c)| c.norm_sqr()).sum();
            assert!(off < 1e-24 * norm_sqr(v).max(1e-300));
        }
    }

    #[test]
    fn decay_curve_is_linear_and_conserves() {
        let p = FiberProblem::new(IonDensity::example(), 1).unwrap();
        let s = LazySpectra::new(p, ThetaGrid::new(4).unwrap());
        let f = band_localized_field(&s, &InitialData::default()).unwrap();
        let flat = FlatBandReport::empty(s.grid().len());
        let spec = WeightedNormSpec::default();
        let times = [0.0, 1.0, 2.0];
        let a = decay_curve(&f, &s, &flat, &times, &spec, 1, 1.5).unwrap();
        let b = decay_curve(&f.scaled(c64::new(0.0, 3.0)), &s, &flat, &times, &spec, 1, 1.5).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert!((3.0 * x.continuous_weighted_norm - y.continuous_weighted_norm).abs() < 1e-10 * y.continuous_weighted_norm);
            assert!((x.continuous_x0_norm - a.rows[0].continuous_x0_norm).abs() < 1e-10 * x.continuous_x0_norm);
            assert_eq!(x.discrete_norm, 0.0);
        }
        assert!(a.rows[2].horizon_flag && !a.rows[1].horizon_flag);
        assert_eq!(a.last_trusted().unwrap().t, 1.0);
        let mut out = Vec::new();
        a.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 4);
    }

    #[test]
    fn reflected_data_reconstructs_real_ion_fields() {
        let s = small_source();
        let grid = s.grid().clone();
        let b = (s.dim() - 6) / 2;
        let base = random_field(&s, 7);
        // q~(2pi - theta) = conj q~(theta) on the ion components
        let f = BlochField::from_fn(&grid, s.dim(), |p, _| {
            let r = grid.reflect(p);
            let mut v = zeros(s.dim());
            for k in 2 * b..2 * b + 6 {
                v[k] = base.values[p][k] + base.values[r][k].conj();
            }
            v
        });
        let cell = bloch_inverse(&f, 1).unwrap();
        for c in &cell.cells {
            for k in 2 * b..2 * b + 6 {
                assert!(c[k].im.abs() < 1e-12);
            }
        }
    }
}
