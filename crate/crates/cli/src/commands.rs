//! The four commands. Each writes its files under the output directory and
//! returns a short human-readable summary.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use spn_bloch::c64;
use spn_bloch::density::{check_jellium, check_wiener_grid, JelliumReport};
use spn_bloch::dynamics::{
    band_localized_field, decay_curve, energy_filter, horizon, sorted_band_values, BlochField, DecayTable,
    WeightedNormSpec,
};
use spn_bloch::grid::ThetaGrid;
use spn_bloch::resolvent::{lap_scan, LapStability, LapTable, ResolventProbe};
use spn_bloch::spectral::{growth_fit, GrowthFit};
use spn_bloch::sweep::{
    band_derivatives, detect_flat_bands, sweep_bands, BandSurface, FlatBandReport, LazySpectra, PointFailure,
    SpectraSource,
};

use crate::config::{ProbeKind, RunConfig};
use crate::output::{Metadata, OutputDir};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Check,
    Bands,
    Evolve,
    Resolvent,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Bands => "bands",
            Command::Evolve => "evolve",
            Command::Resolvent => "resolvent",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    /// `false` when a checked condition failed.
    pub passed: bool,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

/// Runs `command`, writing into `out` (or the configured directory).
pub fn run(command: Command, cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let dir = OutputDir::create(out.unwrap_or(&cfg.output.dir))?;
    let config_file = dir.text("config.toml", &cfg.to_toml())?;
    let mut outcome = match command {
        Command::Check => cmd_check(cfg, &dir),
        Command::Bands => cmd_bands(cfg, &dir),
        Command::Evolve => cmd_evolve(cfg, &dir),
        Command::Resolvent => cmd_resolvent(cfg, &dir),
    }?;
    outcome.files.insert(0, config_file);
    Ok(outcome)
}

#[derive(Serialize)]
struct WienerSummary {
    passed: bool,
    truncation_radius: usize,
    tol: f64,
    points: usize,
    worst_theta: Option<[f64; 3]>,
    worst_min_eig: Option<f64>,
}

#[derive(Serialize)]
struct CheckBody<'a> {
    passed: bool,
    jellium: &'a JelliumReport,
    wiener: WienerSummary,
}

pub fn cmd_check(cfg: &RunConfig, dir: &OutputDir) -> Result<Outcome, CliError> {
    let density = cfg.density()?;
    let tol = &cfg.tolerances;
    let grid = ThetaGrid::new(cfg.grid.l)?;
    let jellium = check_jellium(&density, tol.jellium_radius, tol.jellium_tol)?;
    let wiener = check_wiener_grid(&density, &grid, cfg.lattice.radius, tol.wiener_tol, cfg.lattice.delta_min)?;
    let worst = wiener.worst();
    let passed = jellium.passed && wiener.passed;
    let meta = Metadata::new("check", cfg, cfg.problem()?.dim());
    let body = CheckBody {
        passed,
        jellium: &jellium,
        wiener: WienerSummary {
            passed: wiener.passed,
            truncation_radius: wiener.truncation_radius,
            tol: wiener.tol,
            points: wiener.grid.len(),
            worst_theta: worst.map(|(i, _)| wiener.grid[i]),
            worst_min_eig: worst.map(|(_, v)| v),
        },
    };
    let files = vec![
        dir.json("check.json", &meta, &body)?,
        dir.csv("wiener.csv", &meta, |w| wiener.write_csv(w))?,
    ];
    let verdict = |ok: bool| if ok { "pass" } else { "FAIL" };
    let mut summary = format!(
        "{:<10} {:<6} worst |sigma_hat(2 pi m)| = {:.3e} at m = {:?} (tol {:.1e}, radius {})\n",
        "jellium",
        verdict(jellium.passed),
        jellium.worst_value,
        jellium.worst_m,
        jellium.tol,
        jellium.radius
    );
    summary += &match worst {
        Some((i, v)) => format!(
            "{:<10} {:<6} min lambda_min(Sigma) = {:.3e} at theta = {:?} over {} points\n",
            "wiener",
            verdict(wiener.passed),
            v,
            wiener.grid[i],
            wiener.grid.len()
        ),
        None => format!("{:<10} {:<6} empty grid\n", "wiener", verdict(wiener.passed)),
    };
    Ok(Outcome { passed, summary, files })
}

/// Solves the grid and detects the flat bands; shared by the commands that
/// need the discrete spectrum.
fn solve_grid(cfg: &RunConfig) -> Result<(LazySpectra, BandSurface, FlatBandReport), CliError> {
    let source = LazySpectra::new(cfg.problem()?, ThetaGrid::new(cfg.grid.l)?);
    // configuration errors surface here with their own exit codes, before
    // the sweep turns them into per-point failures
    source.fiber(0)?;
    let surface = sweep_bands(&source);
    let flat = detect_flat_bands(&surface, cfg.tolerances.flat_tol).map_err(|e| match e {
        spn_bloch::Error::Precondition(m) => CliError::Numerical(spn_bloch::Error::EigFailed(m)),
        other => other.into(),
    })?;
    Ok((source, surface, flat))
}

#[derive(Serialize)]
struct GrowthSummary {
    theta: [f64; 3],
    requested: [usize; 2],
    /// The range after clamping `k_hi` to half the dimension.
    effective: [usize; 2],
    fit: Option<GrowthFit>,
    error: Option<String>,
}

#[derive(Serialize)]
struct DerivativeSummary {
    band: usize,
    degenerate_fraction: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct BandsBody<'a> {
    completed_fraction: f64,
    crossing_count: usize,
    failures: &'a [PointFailure],
    flat_bands: &'a FlatBandReport,
    growth: GrowthSummary,
    derivatives: Vec<DerivativeSummary>,
    lambda_min_b: f64,
    kappa_min: f64,
}

pub fn cmd_bands(cfg: &RunConfig, dir: &OutputDir) -> Result<Outcome, CliError> {
    let (source, surface, flat) = solve_grid(cfg)?;
    let dim = surface.dim;
    let growth = growth_summary(cfg, &surface);
    let derivatives = (0..dim)
        .map(|band| match band_derivatives(&surface, band, cfg.tolerances.grad_tol, cfg.tolerances.hess_tol) {
            Ok(d) => DerivativeSummary {
                band,
                degenerate_fraction: Some(d.degenerate_fraction),
                error: None,
            },
            Err(e) => DerivativeSummary {
                band,
                degenerate_fraction: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let finite_min = |v: &[f64]| v.iter().copied().filter(|x| x.is_finite()).fold(f64::INFINITY, f64::min);
    let body = BandsBody {
        completed_fraction: surface.completed_fraction(),
        crossing_count: surface.crossing_count(),
        failures: &surface.failures,
        flat_bands: &flat,
        growth,
        derivatives,
        lambda_min_b: finite_min(&surface.lambda_min_b),
        kappa_min: finite_min(&surface.kappa),
    };
    let meta = Metadata::new("bands", cfg, source.dim());
    let files = vec![
        dir.csv("bands.csv", &meta, |w| surface.write_csv(w))?,
        dir.json("bands.json", &meta, &body)?,
    ];
    let mut summary = format!(
        "{} points x {} bands, {:.1}% solved, {} crossings, {} flat bands\n",
        surface.grid.len(),
        dim,
        100.0 * body.completed_fraction,
        body.crossing_count,
        flat.bands.len()
    );
    if let Some(fit) = &body.growth.fit {
        summary += &format!(
            "growth slope {:.4} over k in [{}, {}], min |omega_k|/k^(2/3) = {:.4e}\n",
            fit.slope, fit.k_lo, fit.k_hi, fit.epsilon_q
        );
    }
    Ok(Outcome {
        passed: true,
        summary,
        files,
    })
}

fn growth_summary(cfg: &RunConfig, surface: &BandSurface) -> GrowthSummary {
    let dim = surface.dim;
    let requested = [cfg.growth.k_lo, cfg.growth.k_hi];
    let k_hi = requested[1].min(dim / 2);
    let effective = [requested[0], k_hi];
    let theta = surface.grid.point(0);
    let (fit, error) = if surface.is_failed(0) {
        (None, Some("first grid point failed".to_string()))
    } else {
        match growth_fit(&surface.sorted[..dim], effective[0], effective[1]) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    GrowthSummary {
        theta,
        requested,
        effective,
        fit,
        error,
    }
}

#[derive(Serialize)]
struct EvolveBody<'a> {
    alpha: f64,
    radius: usize,
    t_max: f64,
    nu: f64,
    flat_bands: usize,
    monotone_deviation: f64,
    /// Weighted norm at the last trusted time over its value at the first.
    decay_ratio: Option<f64>,
    rows: &'a [spn_bloch::dynamics::DecayRow],
}

pub fn cmd_evolve(cfg: &RunConfig, dir: &OutputDir) -> Result<Outcome, CliError> {
    let dy = &cfg.dynamics;
    let radius = cfg.dynamics_radius();
    let spec = WeightedNormSpec::new(dy.alpha)?;
    let (source, _, flat) = solve_grid(cfg)?;
    let mut initial = band_localized_field(&source, &dy.initial_data())?;
    if dy.nu.is_finite() {
        initial = energy_filter(&initial, &source, dy.nu)?;
    }
    let t_max = horizon(source.grid(), &sorted_band_values(&source, dy.band)?, dy.c_horizon);
    let table = decay_curve(&initial, &source, &flat, &dy.times, &spec, radius, t_max)?;
    let decay_ratio = decay_ratio(&table);
    let mut meta = Metadata::new("evolve", cfg, source.dim());
    meta.push("alpha", dy.alpha);
    meta.push("radius", radius);
    meta.push("t_max", t_max);
    let body = EvolveBody {
        alpha: dy.alpha,
        radius,
        t_max,
        nu: dy.nu,
        flat_bands: flat.bands.len(),
        monotone_deviation: table.monotone_deviation,
        decay_ratio,
        rows: &table.rows,
    };
    let files = vec![
        dir.csv("decay.csv", &meta, |w| table.write_csv(w))?,
        dir.json("decay.json", &meta, &body)?,
    ];
    let summary = format!(
        "{} times, horizon t_max = {:.4e}, weighted-norm ratio at last trusted time = {}\n",
        table.rows.len(),
        t_max,
        decay_ratio.map_or("n/a".to_string(), |r| format!("{r:.4e}"))
    );
    Ok(Outcome {
        passed: true,
        summary,
        files,
    })
}

fn decay_ratio(table: &DecayTable) -> Option<f64> {
    let first = table.rows.iter().find(|r| !r.horizon_flag)?;
    let last = table.last_trusted()?;
    (first.continuous_weighted_norm > 0.0).then(|| last.continuous_weighted_norm / first.continuous_weighted_norm)
}

/// Uniform entries in the unit square at every point, drawn in grid order.
pub fn random_field(grid: &ThetaGrid, dim: usize, seed: u64, amplitude: f64) -> BlochField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..grid.len())
        .map(|_| {
            (0..dim)
                .map(|_| c64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * amplitude)
                .collect()
        })
        .collect();
    BlochField {
        grid: grid.clone(),
        dim,
        values,
    }
}

#[derive(Serialize)]
struct ResolventBody<'a> {
    alpha: f64,
    radius: usize,
    window: [f64; 2],
    epsilons: &'a [f64],
    stability: &'a [LapStability],
}

pub fn cmd_resolvent(cfg: &RunConfig, dir: &OutputDir) -> Result<Outcome, CliError> {
    let rc = &cfg.resolvent;
    let radius = cfg.resolvent_radius();
    let spec = WeightedNormSpec::new(rc.alpha)?;
    let (source, _, flat) = solve_grid(cfg)?;
    let field = match rc.probe {
        ProbeKind::Band => band_localized_field(&source, &rc.initial_data())?,
        ProbeKind::Random => random_field(source.grid(), source.dim(), cfg.seed, rc.amplitude),
    };
    let mut probe = ResolventProbe::new(&field, &source, &flat, rc.epsilons.clone())?;
    if let Some(w) = rc.omega_window {
        probe = probe.with_window(w)?;
    }
    let omegas = probe.omega_mesh(rc.omega_samples);
    let table: LapTable = lap_scan(&probe, &omegas, &spec, radius)?;
    let mut meta = Metadata::new("resolvent", cfg, source.dim());
    meta.push("alpha", rc.alpha);
    meta.push("radius", radius);
    meta.push("omega_lo", probe.window[0]);
    meta.push("omega_hi", probe.window[1]);
    let body = ResolventBody {
        alpha: rc.alpha,
        radius,
        window: probe.window,
        epsilons: &probe.epsilons,
        stability: &table.stability,
    };
    let files = vec![
        dir.csv("lap.csv", &meta, |w| table.write_csv(w))?,
        dir.json("lap.json", &meta, &body)?,
    ];
    let flagged = table.rows.iter().filter(|r| !r.trusted).count();
    let ratios: Vec<f64> = table
        .stability
        .iter()
        .flat_map(|s| s.min_ratio.into_iter().chain(s.max_ratio))
        .collect();
    let summary = format!(
        "{} omegas x {} epsilons over [{:.4e}, {:.4e}], {} rows below the resolution floor, trusted ratios in [{}, {}]\n",
        omegas.len(),
        probe.epsilons.len(),
        probe.window[0],
        probe.window[1],
        flagged,
        fmt_opt(ratios.iter().copied().reduce(f64::min)),
        fmt_opt(ratios.iter().copied().reduce(f64::max)),
    );
    Ok(Outcome {
        passed: true,
        summary,
        files,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("n/a".to_string(), |v| format!("{v:.4}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str) -> RunConfig {
        RunConfig::from_toml(text).unwrap()
    }

    #[test]
    fn random_field_is_seeded() {
        let grid = ThetaGrid::new(2).unwrap();
        let a = random_field(&grid, 4, 7, 1.0);
        assert_eq!(a, random_field(&grid, 4, 7, 1.0));
        assert_ne!(a, random_field(&grid, 4, 8, 1.0));
        assert!(a.values.iter().flatten().all(|z| z.re.abs() <= 1.0 && z.im.abs() <= 1.0));
    }

    #[test]
    fn check_passes_for_the_example_density() {
        let tmp = tempfile::tempdir().unwrap();
        let out = run(Command::Check, &config("[grid]\nl = 2"), Some(tmp.path())).unwrap();
        assert!(out.passed, "{}", out.summary);
        let json: serde_json::Value =
            serde_json::from_slice(&std::fs::read(tmp.path().join("check.json")).unwrap()).unwrap();
        assert_eq!(json["metadata"]["command"], "check");
        assert_eq!(json["jellium"]["passed"], true);
    }

    #[test]
    fn check_names_the_gaussian_offender() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config("[density]\nkind = \"gaussian\"\n[grid]\nl = 2");
        let out = run(Command::Check, &cfg, Some(tmp.path())).unwrap();
        assert!(!out.passed);
        let json: serde_json::Value =
            serde_json::from_slice(&std::fs::read(tmp.path().join("check.json")).unwrap()).unwrap();
        let m: Vec<i64> = json["jellium"]["worst_m"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_i64().unwrap())
            .collect();
        assert_eq!(m.iter().map(|x| x.abs()).sum::<i64>(), 1);
    }

    #[test]
    fn growth_range_is_clamped() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config("[basis]\ncutoff = 1\n[grid]\nl = 2");
        let out = run(Command::Bands, &cfg, Some(tmp.path())).unwrap();
        assert!(out.passed);
        let json: serde_json::Value =
            serde_json::from_slice(&std::fs::read(tmp.path().join("bands.json")).unwrap()).unwrap();
        // N = 1: 27 modes, dimension 60
        assert_eq!(json["metadata"]["dim"], 60);
        assert_eq!(json["growth"]["effective"][1], 30);
        assert!(json["growth"]["fit"]["slope"].as_f64().is_some());
    }

    #[test]
    fn gaussian_density_fails_assembly_as_a_condition() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config("[density]\nkind = \"gaussian\"\n[basis]\ncutoff = 1\n[grid]\nl = 2");
        let err = run(Command::Bands, &cfg, Some(tmp.path()));
        match err {
            Err(e) => assert_eq!(e.exit_code(), 1, "{e}"),
            Ok(o) => panic!("expected a failure, got {}", o.summary),
        }
    }
}
