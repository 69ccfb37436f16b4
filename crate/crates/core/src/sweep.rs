//! Band sweeps over the Brillouin zone: per-point solves, continuation of
//! band labels by eigenvector overlap, flat-band detection and finite
//! difference derivatives.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fiber::{Fiber, FiberProblem};
use crate::grid::ThetaGrid;
use crate::report::fmt_f64;

/// Overlap below which a band continuation is treated as a crossing.
pub const QUALITY_THRESHOLD: f64 = 0.5;
/// Overlaps below this are never paired directly.
const PAIR_FLOOR: f64 = 0.1;

pub const DEFAULT_FLAT_TOL: f64 = 1e-6;
pub const DEFAULT_GRAD_TOL: f64 = 1e-4;
pub const DEFAULT_HESS_TOL: f64 = 1e-4;

/// Per-point fibers on a grid, either kept in memory or solved on demand.
pub trait SpectraSource: Sync {
    fn grid(&self) -> &ThetaGrid;
    fn dim(&self) -> usize;
    fn fiber(&self, idx: usize) -> Result<Arc<Fiber>>;
}

pub struct StoredSpectra {
    grid: ThetaGrid,
    fibers: Vec<Arc<Fiber>>,
}

impl StoredSpectra {
    pub fn solve(problem: &FiberProblem, grid: &ThetaGrid) -> Result<Self> {
        let fibers = grid
            .points()
            .par_iter()
            .map(|&theta| problem.solve(theta).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: grid.clone(),
            fibers,
        })
    }

    pub fn from_fibers(grid: ThetaGrid, fibers: Vec<Arc<Fiber>>) -> Result<Self> {
        if fibers.len() != grid.len() {
            return Err(Error::GaugeMismatch(format!(
                "{} fibers for a grid of {} points",
                fibers.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, fibers })
    }
}

impl SpectraSource for StoredSpectra {
    fn grid(&self) -> &ThetaGrid {
        &self.grid
    }
    fn dim(&self) -> usize {
        self.fibers.first().map_or(0, |f| f.layout.dim())
    }
    fn fiber(&self, idx: usize) -> Result<Arc<Fiber>> {
        Ok(self.fibers[idx].clone())
    }
}

pub struct LazySpectra {
    grid: ThetaGrid,
    problem: FiberProblem,
}

impl LazySpectra {
    pub fn new(problem: FiberProblem, grid: ThetaGrid) -> Self {
        Self { grid, problem }
    }

    pub fn problem(&self) -> &FiberProblem {
        &self.problem
    }
}

impl SpectraSource for LazySpectra {
    fn grid(&self) -> &ThetaGrid {
        &self.grid
    }
    fn dim(&self) -> usize {
        self.problem.dim()
    }
    fn fiber(&self, idx: usize) -> Result<Arc<Fiber>> {
        self.problem.solve(self.grid.point(idx)).map(Arc::new)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub index: usize,
    pub theta: [f64; 3],
    pub message: String,
}

/// Band values on a grid after continuation.
///
/// All per-band arrays are indexed `point * dim + band`. `sorted` holds the
/// values in the solver's order and `assignment[point * dim + band]` is the
/// column of that order carrying the matched band.
#[derive(Clone, Debug)]
pub struct BandSurface {
    pub grid: ThetaGrid,
    pub dim: usize,
    pub bands: Vec<f64>,
    pub sorted: Vec<f64>,
    pub assignment: Vec<usize>,
    pub quality: Vec<f64>,
    pub lambda_min_b: Vec<f64>,
    pub kappa: Vec<f64>,
    pub min_abs_omega: Vec<f64>,
    pub failures: Vec<PointFailure>,
}

impl BandSurface {
    /// A surface from given band values, with identity assignment and
    /// perfect matches.
    pub fn from_values(grid: ThetaGrid, dim: usize, bands: Vec<f64>) -> Result<Self> {
        if bands.len() != grid.len() * dim {
            return Err(Error::Precondition("band array does not match grid and dimension".into()));
        }
        let n = grid.len();
        let min_abs_omega = bands
            .chunks(dim.max(1))
            .map(|c| c.iter().fold(f64::INFINITY, |m, w| m.min(w.abs())))
            .collect();
        Ok(Self {
            dim,
            sorted: bands.clone(),
            assignment: (0..n).flat_map(|_| 0..dim).collect(),
            quality: vec![1.0; n * dim],
            bands,
            lambda_min_b: vec![f64::NAN; n],
            kappa: vec![f64::NAN; n],
            min_abs_omega,
            failures: Vec::new(),
            grid,
        })
    }

    pub fn band(&self, point: usize, band: usize) -> f64 {
        self.bands[point * self.dim + band]
    }

    pub fn is_failed(&self, point: usize) -> bool {
        self.failures.iter().any(|f| f.index == point)
    }

    pub fn completed_fraction(&self) -> f64 {
        if self.grid.is_empty() {
            return 1.0;
        }
        1.0 - self.failures.len() as f64 / self.grid.len() as f64
    }

    /// Number of `(point, band)` pairs whose continuation was flagged.
    pub fn crossing_count(&self) -> usize {
        self.quality.iter().filter(|q| !(**q >= QUALITY_THRESHOLD)).count()
    }

    /// `theta1,theta2,theta3,band_index,omega,match_quality`, one row per
    /// point and band.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "theta1,theta2,theta3,band_index,omega,match_quality")?;
        for (p, theta) in self.grid.points().iter().enumerate() {
            for k in 0..self.dim {
                let i = p * self.dim + k;
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    fmt_f64(theta[0]),
                    fmt_f64(theta[1]),
                    fmt_f64(theta[2]),
                    k,
                    fmt_f64(self.bands[i]),
                    fmt_f64(self.quality[i])
                )?;
            }
        }
        Ok(())
    }
}

/// Solves every grid point and continues band labels from each point's
/// lexicographic predecessor.
///
/// Points are processed one slab (fixed first grid index) at a time so that
/// only a slab of eigenvector matrices is alive at once; solves inside a slab
/// run in parallel and the matching is sequential.
pub fn sweep_bands(source: &dyn SpectraSource) -> BandSurface {
    let grid = source.grid().clone();
    let dim = source.dim();
    let n = grid.len();
    let l = grid.l();
    let slab = l * l;
    let mut surface = BandSurface {
        grid: grid.clone(),
        dim,
        bands: vec![f64::NAN; n * dim],
        sorted: vec![f64::NAN; n * dim],
        assignment: (0..n).flat_map(|_| 0..dim).collect(),
        quality: vec![0.0; n * dim],
        lambda_min_b: vec![f64::NAN; n],
        kappa: vec![f64::NAN; n],
        min_abs_omega: vec![f64::NAN; n],
        failures: Vec::new(),
    };
    let mut anchor: Option<(usize, Arc<Fiber>)> = None;
    for start in (0..n).step_by(slab.max(1)) {
        let end = (start + slab).min(n);
        let solved: Vec<Result<Arc<Fiber>>> =
            (start..end).into_par_iter().map(|i| source.fiber(i)).collect();
        let mut slab_fibers: Vec<Option<Arc<Fiber>>> = Vec::with_capacity(end - start);
        for (offset, res) in solved.into_iter().enumerate() {
            let idx = start + offset;
            match res {
                Ok(f) => {
                    record_point(&mut surface, idx, &f);
                    slab_fibers.push(Some(f));
                }
                Err(e) => {
                    surface.failures.push(PointFailure {
                        index: idx,
                        theta: grid.point(idx),
                        message: e.to_string(),
                    });
                    slab_fibers.push(None);
                }
            }
        }
        for idx in start..end {
            let Some(cur) = slab_fibers[idx - start].clone() else {
                continue;
            };
            let pred = grid.predecessor(idx).and_then(|p| {
                if p >= start {
                    slab_fibers[p - start].clone().map(|f| (p, f))
                } else {
                    anchor.as_ref().filter(|(a, _)| *a == p).cloned()
                }
            });
            match pred {
                Some((p, prev)) => match_point(&mut surface, p, &prev, idx, &cur),
                None => {
                    let first = grid.predecessor(idx).is_none();
                    let q = if first { 1.0 } else { 0.0 };
                    for k in 0..dim {
                        surface.quality[idx * dim + k] = q;
                    }
                }
            }
        }
        // the next slab's first point continues from this slab's first point
        anchor = slab_fibers[0].clone().map(|f| (start, f));
    }
    surface
}

fn record_point(surface: &mut BandSurface, idx: usize, f: &Fiber) {
    let dim = surface.dim;
    let w = f.omegas();
    surface.sorted[idx * dim..(idx + 1) * dim].copy_from_slice(w);
    surface.bands[idx * dim..(idx + 1) * dim].copy_from_slice(w);
    surface.lambda_min_b[idx] = f.spectral.lambda_min_b;
    surface.kappa[idx] = f.spectral.kappa;
    surface.min_abs_omega[idx] = f.spectral.min_abs_omega();
}

/// Greedy maximal-overlap assignment of the predecessor's bands to the
/// current point's columns.
fn match_point(surface: &mut BandSurface, p: usize, prev: &Fiber, idx: usize, cur: &Fiber) {
    let dim = surface.dim;
    let overlap = prev.spectral.vectors.adjoint() * &cur.spectral.vectors;
    let prev_assign: Vec<usize> = surface.assignment[p * dim..(p + 1) * dim].to_vec();
    let mut pairs = Vec::new();
    for (k, &row) in prev_assign.iter().enumerate() {
        for col in 0..dim {
            let o = overlap[(row, col)].norm();
            if o > PAIR_FLOOR {
                pairs.push((o, k, col));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut band_col = vec![usize::MAX; dim];
    let mut col_used = vec![false; dim];
    for (_, k, col) in pairs {
        if band_col[k] == usize::MAX && !col_used[col] {
            band_col[k] = col;
            col_used[col] = true;
        }
    }
    let mut free = (0..dim).filter(|&c| !col_used[c]);
    for c in band_col.iter_mut() {
        if *c == usize::MAX {
            *c = free.next().expect("as many columns as bands");
        }
    }
    let w = cur.omegas();
    for k in 0..dim {
        let col = band_col[k];
        surface.assignment[idx * dim + k] = col;
        surface.bands[idx * dim + k] = w[col];
        surface.quality[idx * dim + k] = overlap[(prev_assign[k], col)].norm().min(1.0);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatBand {
    pub band: usize,
    /// Median over the grid.
    pub value: f64,
    pub max_deviation: f64,
}

/// Bands constant over the grid, sorted by `|omega*|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatBandReport {
    pub flat_tol: f64,
    pub bands: Vec<FlatBand>,
    /// For every grid point, the solver columns carrying a flat band.
    #[serde(skip)]
    pub columns: Vec<Vec<usize>>,
}

impl FlatBandReport {
    pub fn empty(points: usize) -> Self {
        Self {
            flat_tol: DEFAULT_FLAT_TOL,
            bands: Vec::new(),
            columns: vec![Vec::new(); points],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }
}

/// A band is flat when `max - min < flat_tol max(1, median |omega|)` over the
/// successfully solved points.
pub fn detect_flat_bands(surface: &BandSurface, flat_tol: f64) -> Result<FlatBandReport> {
    if surface.completed_fraction() < 0.9 {
        return Err(Error::Precondition(format!(
            "only {:.1}% of the grid was solved",
            100.0 * surface.completed_fraction()
        )));
    }
    let dim = surface.dim;
    let ok: Vec<usize> = (0..surface.grid.len()).filter(|&p| !surface.is_failed(p)).collect();
    let mut bands = Vec::new();
    for k in 0..dim {
        let mut vals: Vec<f64> = ok.iter().map(|&p| surface.band(p, k)).collect();
        if vals.is_empty() {
            continue;
        }
        vals.sort_by(f64::total_cmp);
        let (lo, hi) = (vals[0], vals[vals.len() - 1]);
        let median = vals[vals.len() / 2];
        let mut abs: Vec<f64> = vals.iter().map(|v| v.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let scale = abs[abs.len() / 2].max(1.0);
        if hi - lo < flat_tol * scale {
            let max_deviation = (hi - median).max(median - lo);
            bands.push(FlatBand {
                band: k,
                value: median,
                max_deviation,
            });
        }
    }
    bands.sort_by(|a, b| a.value.abs().total_cmp(&b.value.abs()).then(a.band.cmp(&b.band)));
    let columns = (0..surface.grid.len())
        .map(|p| {
            bands
                .iter()
                .map(|fb| surface.assignment[p * dim + fb.band])
                .collect()
        })
        .collect();
    Ok(FlatBandReport {
        flat_tol,
        bands,
        columns,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandDerivatives {
    pub band: usize,
    pub gradient: Vec<[f64; 3]>,
    pub hessian: Vec<[[f64; 3]; 3]>,
    /// Fraction of points with `|grad| < grad_tol` and `|det Hess| < hess_tol`.
    pub degenerate_fraction: f64,
    pub grad_tol: f64,
    pub hess_tol: f64,
}

/// Periodic central differences of one matched band.
pub fn band_derivatives(
    surface: &BandSurface,
    band: usize,
    grad_tol: f64,
    hess_tol: f64,
) -> Result<BandDerivatives> {
    let dim = surface.dim;
    if band >= dim {
        return Err(Error::Precondition(format!("band {band} out of range")));
    }
    for p in 0..surface.grid.len() {
        let q = surface.quality[p * dim + band];
        if surface.is_failed(p) || !(q >= QUALITY_THRESHOLD) {
            return Err(Error::CrossingContamination { band, point: p });
        }
    }
    let values: Vec<f64> = (0..surface.grid.len()).map(|p| surface.band(p, band)).collect();
    let (gradient, hessian) = finite_differences(&surface.grid, &values);
    let degenerate = gradient
        .iter()
        .zip(&hessian)
        .filter(|(g, h)| norm3(**g) < grad_tol && det3(h).abs() < hess_tol)
        .count();
    Ok(BandDerivatives {
        band,
        degenerate_fraction: degenerate as f64 / surface.grid.len().max(1) as f64,
        gradient,
        hessian,
        grad_tol,
        hess_tol,
    })
}

/// Gradients and Hessians of a periodic grid function.
pub fn finite_differences(grid: &ThetaGrid, values: &[f64]) -> (Vec<[f64; 3]>, Vec<[[f64; 3]; 3]>) {
    let h = grid.spacing();
    let at = |p: usize, steps: &[(usize, isize)]| {
        let mut q = p;
        for &(axis, s) in steps {
            q = grid.neighbor(q, axis, s);
        }
        values[q]
    };
    (0..grid.len())
        .map(|p| {
            let mut g = [0.0; 3];
            let mut hs = [[0.0; 3]; 3];
            for a in 0..3 {
                let plus = at(p, &[(a, 1)]);
                let minus = at(p, &[(a, -1)]);
                g[a] = (plus - minus) / (2.0 * h);
                hs[a][a] = (plus - 2.0 * values[p] + minus) / (h * h);
                for b in a + 1..3 {
                    let v = (at(p, &[(a, 1), (b, 1)]) - at(p, &[(a, 1), (b, -1)])
                        - at(p, &[(a, -1), (b, 1)])
                        + at(p, &[(a, -1), (b, -1)]))
                        / (4.0 * h * h);
                    hs[a][b] = v;
                    hs[b][a] = v;
                }
            }
            (g, hs)
        })
        .unzip()
}

/// Largest finite-difference group speed of solver column `column`, the
/// band at a fixed rank of the ordering.
pub fn max_group_speed(surface: &BandSurface, column: usize) -> f64 {
    let values: Vec<f64> = (0..surface.grid.len())
        .map(|p| surface.sorted[p * surface.dim + column])
        .collect();
    finite_differences(&surface.grid, &values)
        .0
        .iter()
        .map(|g| norm3(*g))
        .fold(0.0, f64::max)
}

fn norm3(x: [f64; 3]) -> f64 {
    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}
